import numpy as np
import pytest

from wearloc.evaluation import label_frames, training_set
from wearloc.forest import ForestParams, train_forest
from wearloc.pipeline import MOVING_VOCABULARY, location_vocabulary
from wearloc.synth import generate_subjects, load_profile_bank
from wearloc.traces import resample

_criteria = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(crit, "PASS")
        _criteria[crit] = "PASS" if prev == "PASS" and report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, text), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {number}: {status}  {text}")


@pytest.fixture(scope="session")
def bank():
    return load_profile_bank()


@pytest.fixture(scope="session")
def trained(bank):
    """Small moving/location models per vru, trained on 6 synthetic subjects."""
    out = {}
    for vru in ("pedestrian", "cyclist"):
        traces = [resample(t) for t in generate_subjects(bank, vru, 6, 40.0, seed=101)]
        ts = training_set([label_frames(t) for t in traces])
        moving = train_forest(ts.features, ts.moving_labels, ForestParams(n_trees=30, seed=1),
                              MOVING_VOCABULARY, "moving", vru)
        m = ts.moving
        location = train_forest(ts.features[m], ts.locations[m], ForestParams(n_trees=30, seed=2),
                                location_vocabulary(vru), "location", vru)
        out[vru] = (moving, location)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

from dataclasses import replace
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_runs
from wearloc.forest import ForestParams, ModelError, train_forest
from wearloc.pipeline import (DEFAULT_CONFIG, ModelKindError, LocationLabel, PipelineConfig, check_models,
                              classify_location_frame, classify_moving_frame, detect, location_vocabulary,
                              run_pipeline, segment_moving, smooth_moving, smooth_sequence, trace_frames,
                              vote_segment)
from wearloc.synth import generate_trace
from wearloc.traces import UniformTrace, resample

M, S = True, False


def profile(bank, vru, location):
    return next(p for p in bank if p.vru == vru and p.location == location)


class TestSmoothing:
    @pytest.mark.parametrize("history, expected", [
        ([M, M, M, M, M], True),
        ([M, M, M, M, S], True),
        ([S, M, M, M, M], True),
        ([M, M, M, S, S], False),
        ([S] * 5, False),
    ])
    def test_examples(self, history, expected):
        assert smooth_moving(history) is expected

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_warm_up_is_not_moving(self, n):
        assert smooth_moving([M] * n) is False

    def test_only_last_five_count(self):
        assert smooth_moving([S, S, S, M, M, M, M, M]) is True
        assert smooth_moving([M, M, M, S, S, M, M, M]) is False

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=30), st.data())
    def test_flipping_to_moving_is_monotone(self, raw, data):
        i = data.draw(st.integers(0, len(raw) - 1))
        flipped = list(raw)
        flipped[i] = True
        before, after = smooth_sequence(raw), smooth_sequence(flipped)
        assert np.all(after[before])

    def test_config_default_constants(self):
        c = PipelineConfig()
        assert (c.window_len, c.hop, c.smoothing_len, c.smoothing_min_moving, c.min_segment_frames) == (256, 50, 5, 4, 5)
        assert c.feature_dim == 132
        with pytest.raises(ValueError):
            PipelineConfig(hop=0)
        with pytest.raises(ValueError):
            PipelineConfig(smoothing_min_moving=6)


class TestSegments:
    @pytest.mark.parametrize("flags, expected", [
        ([True] * 4, []),
        ([True] * 5, [(0, 4)]),
        ([True] * 5 + [False] + [True] * 6, [(0, 4), (6, 11)]),
        ([], []),
    ])
    def test_examples(self, flags, expected):
        assert segment_moving(flags) == expected

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), max_size=60), st.integers(1, 8))
    def test_matches_brute_force(self, flags, min_len):
        assert segment_moving(flags, min_len) == brute_force_runs(flags, min_len)


class TestVote:
    def test_majority(self):
        probs = np.eye(3)[[0, 0, 1, 0, 0]]
        assert vote_segment(list("AABAA"), probs, "ABC") == "A"

    def test_tie_broken_by_summed_probability(self):
        probs = np.array([[0.9, 0.1, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.6, 0.4], [0.0, 0.5, 0.5]])
        assert probs[:, 0].sum() == pytest.approx(1.9) and probs[:, 1].sum() == pytest.approx(2.2)
        assert vote_segment(list("AABBC"), probs, "ABC") == "B"

    def test_full_tie_goes_to_lowest_index(self):
        probs = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert vote_segment(["B", "A"], probs, "AB") == "A"

    def test_unanimous(self):
        assert vote_segment(["X"] * 4, np.tile([0.0, 1.0], (4, 1)), ["W", "X"]) == "X"


def test_location_label_validation():
    assert str(LocationLabel("cyclist", "bicycle_rack")) == "bicycle_rack"
    with pytest.raises(ValueError):
        LocationLabel("pedestrian", "bicycle_rack")
    with pytest.raises(ValueError):
        location_vocabulary("car")


class TestStages:
    def test_moving_frames(self, bank, trained):
        moving, _ = trained["pedestrian"]
        p = profile(bank, "pedestrian", "jacket")
        still = resample(generate_trace(replace(p, standing_fraction=1.0), 10.0, seed=5))
        walk = resample(generate_trace(replace(p, standing_fraction=0.0), 10.0, seed=5))
        for fr in trace_frames(still):
            flag, pm = classify_moving_frame(moving, fr)
            assert flag is False and 0.0 <= pm <= 1.0
        for fr in trace_frames(walk):
            flag, pm = classify_moving_frame(moving, fr)
            assert flag is True and 0.0 <= pm <= 1.0

    def test_bicycle_rack_frame(self, bank, trained):
        _, location = trained["cyclist"]
        p = profile(bank, "cyclist", "bicycle_rack")
        tr = resample(generate_trace(replace(p, standing_fraction=0.0), 10.0, seed=77))
        frame = trace_frames(tr)[5]
        label, proba = classify_location_frame(location, frame)
        assert label == "bicycle_rack"
        assert proba.shape == (4,)
        assert classify_location_frame(location, frame)[1].tolist() == proba.tolist()

    def test_stage_models_checked(self, trained):
        moving, location = trained["cyclist"]
        frame = trace_frames(UniformTrace(0.0, 100.0, np.tile([0, 0, 9.81], (256, 1)), np.zeros((256, 3))))[0]
        with pytest.raises(ModelKindError):
            classify_moving_frame(location, frame)
        with pytest.raises(ModelKindError):
            classify_location_frame(moving, frame)


class TestRunPipeline:
    def test_walking_trouser_front(self, bank, trained):
        moving, location = trained["pedestrian"]
        p = profile(bank, "pedestrian", "trouser_front")
        tr = resample(generate_trace(replace(p, standing_fraction=0.0, styles=()), 60.0, seed=9))
        report = run_pipeline(tr, moving, location)
        assert [(s.segment_label, s.start_frame) for s in report.segments] == [("trouser_front", 4)]
        assert report.segments[0].end_frame == len(report.frames) - 1

    def test_standing_trace_has_no_segments(self, bank, trained):
        moving, location = trained["pedestrian"]
        p = profile(bank, "pedestrian", "backpack")
        tr = resample(generate_trace(replace(p, standing_fraction=1.0), 10.0, seed=3))
        report = run_pipeline(tr, moving, location)
        assert len(report.frames) == 15
        assert report.segments == []
        assert all(f.location is None for f in report.frames)

    def test_short_trace_gives_empty_report(self, trained):
        moving, location = trained["cyclist"]
        tr = UniformTrace(0.0, 100.0, np.tile([0, 0, 9.81], (255, 1)), np.zeros((255, 3)))
        report = run_pipeline(tr, moving, location)
        assert report.frames == [] and report.segments == []
        assert report.to_dict() == {"frames": [], "segments": [], "vru": "cyclist"}

    def test_report_invariants_and_determinism(self, bank, trained):
        moving, location = trained["cyclist"]
        for i, p in enumerate(x for x in bank if x.vru == "cyclist"):
            tr = resample(generate_trace(p, 60.0, seed=200 + i))
            a = run_pipeline(tr, moving, location)
            b = run_pipeline(tr, moving, location)
            assert a.to_json() == b.to_json()
            inside = set()
            for seg in a.segments:
                assert len(seg) >= 5
                assert all(a.frames[j].moving_smoothed for j in range(seg.start_frame, seg.end_frame + 1))
                inside |= set(range(seg.start_frame, seg.end_frame + 1))
            for f in a.frames:
                assert (f.location is not None) == (f.i in inside)

    def test_report_json_layout(self, bank, trained):
        moving, location = trained["cyclist"]
        p = profile(bank, "cyclist", "jacket")
        doc = run_pipeline(resample(generate_trace(replace(p, standing_fraction=0.0), 8.0, seed=1)),
                           moving, location).to_dict()
        assert set(doc) == {"frames", "segments", "vru"}
        f = doc["frames"][-1]
        assert set(f) == {"i", "t", "moving_raw", "p_moving", "moving_smoothed", "location", "probs"}
        assert set(f["probs"]) == set(location_vocabulary("cyclist"))
        seg = doc["segments"][0]
        assert set(seg) == {"start", "end", "label", "votes"}
        assert sum(seg["votes"].values()) == seg["end"] - seg["start"] + 1


class TestModelChecks:
    def test_wrong_vru(self, trained):
        moving, _ = trained["pedestrian"]
        _, cyc_location = trained["cyclist"]
        with pytest.raises(ModelError):
            check_models(moving, cyc_location)
        with pytest.raises(ModelError):
            check_models(trained["cyclist"][0], cyc_location, vru="pedestrian")

    def test_swapped_kinds(self, trained):
        moving, location = trained["cyclist"]
        with pytest.raises(ModelKindError):
            detect(np.zeros((1, 132)), [0.0], location, moving)

    def test_feature_dim(self, trained):
        moving, location = trained["cyclist"]
        with pytest.raises(ModelError):
            check_models(moving, location, PipelineConfig(n_bins=20))

    def test_trace_vru_mismatch(self, bank, trained):
        moving, location = trained["cyclist"]
        tr = resample(generate_trace(profile(bank, "pedestrian", "jacket"), 6.0, seed=1))
        with pytest.raises(ModelError):
            run_pipeline(tr, moving, location)

    def test_vru_inferred_from_vocabulary(self):
        X = np.random.default_rng(0).normal(size=(40, 132))
        mov = train_forest(X, ["moving", "standing"] * 20, ForestParams(n_trees=1), ("standing", "moving"), "moving")
        loc = train_forest(X, ["jacket", "backpack"] * 20, ForestParams(n_trees=1),
                           location_vocabulary("cyclist"), "location")
        check_models(mov, loc, DEFAULT_CONFIG, "cyclist")
        with pytest.raises(ModelError):
            check_models(mov, loc, DEFAULT_CONFIG, "pedestrian")


def test_exhaustive_short_histories():
    for bits in product([False, True], repeat=5):
        assert smooth_moving(list(bits)) == (sum(bits) >= 4)

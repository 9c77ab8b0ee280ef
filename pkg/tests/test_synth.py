from dataclasses import replace

import numpy as np
import pytest

from oracles import direct_dft
from wearloc.features import bin_frequency, stack_features
from wearloc.pipeline import trace_frames
from wearloc.synth import (AMPLITUDE_JITTER, GRAVITY, MotionProfile, ProfileError, activity_schedule,
                           dump_profile_bank, generate_subjects, generate_trace, jitter_profile, load_profile_bank,
                           subject_id, trace_filename, validate_bank)
from wearloc.traces import LOCATIONS, VRU_TYPES, format_trace, parse_trace, resample


def profile(bank, vru, location):
    return next(p for p in bank if p.vru == vru and p.location == location)


def simple(**kw):
    doc = dict(vru="pedestrian", location="jacket", cadence=2.0, harmonics=[[1.0, 0.5]] * 6,
               noise_sigma={"accel": 0.05, "gyro": 0.01}, motion_noise={"accel": 0.0, "gyro": 0.0})
    doc.update(kw)
    return MotionProfile(**doc)


class TestProfiles:
    def test_shipped_bank(self, bank):
        for vru in VRU_TYPES:
            ps = [p for p in bank if p.vru == vru]
            assert sorted(p.location for p in ps) == sorted(LOCATIONS[vru])
            assert all(p.amplitudes.shape == (6, 4) for p in ps)
        assert {p.cadence for p in bank if p.vru == "pedestrian"} == {2.0}
        assert {p.cadence for p in bank if p.vru == "cyclist"} == {1.5}

    def test_dump_load_round_trip(self, bank, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text(dump_profile_bank(bank))
        assert load_profile_bank(path) == bank

    @pytest.mark.parametrize("kw", [
        dict(cadence=0.0),
        dict(harmonics=[[1.0, -0.1]] * 6),
        dict(harmonics=[[1.0]] * 5),
        dict(location="bicycle_rack"),
        dict(vru="driver"),
        dict(standing_fraction=1.5),
        dict(noise_sigma={"accel": 0.1}),
        dict(styles=([[1.0]] * 6,)),
    ])
    def test_invalid_profiles(self, kw):
        with pytest.raises(ProfileError):
            simple(**kw)

    def test_duplicate_signature_rejected(self):
        a = simple()
        b = replace(a, location="backpack")
        with pytest.raises(ProfileError, match="signature"):
            validate_bank([a, b])
        validate_bank([a, replace(b, harmonics=[[1.0, 0.4]] * 6)])

    def test_bad_bank_file(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text("{not json")
        with pytest.raises(ProfileError):
            load_profile_bank(path)
        path.write_text('[{"vru": "pedestrian"}]')
        with pytest.raises(ProfileError):
            load_profile_bank(path)


class TestGenerate:
    def test_sample_count(self):
        assert len(generate_trace(simple(), 60.0, seed=1)) == 6000

    def test_deterministic(self, bank):
        p = profile(bank, "cyclist", "jacket")
        assert generate_trace(p, 12.0, seed=4) == generate_trace(p, 12.0, seed=4)
        assert generate_trace(p, 12.0, seed=4) != generate_trace(p, 12.0, seed=5)

    def test_too_short(self):
        with pytest.raises(ProfileError):
            generate_trace(simple(), 4.9, seed=1)

    def test_satisfies_trace_invariants(self, bank):
        tr = generate_trace(profile(bank, "pedestrian", "backpack"), 6.0, seed=2, subject="ped07")
        again = parse_trace(format_trace(tr))
        assert again == tr
        assert set(tr.annotations["vru"]) == {"pedestrian"}
        assert set(tr.annotations["subject"]) == {"ped07"}
        assert set(tr.annotations["activity"]) <= {"moving", "standing"}

    @pytest.mark.parametrize("vru, location", [("pedestrian", "jacket"), ("pedestrian", "trouser_back")])
    def test_cadence_peak(self, bank, vru, location):
        p = replace(profile(bank, vru, location), standing_fraction=0.0)
        tr = generate_trace(p, 10.0, seed=3)
        norm = np.linalg.norm(tr.accel, axis=1)[300:556]
        spec = np.abs(direct_dft(norm - norm.mean(), 60))
        k = int(np.argmax(spec[1:])) + 1
        assert abs(bin_frequency(k) - 2.0) <= bin_frequency(1)

    def test_heading_leaves_features_unchanged(self, bank):
        p = profile(bank, "cyclist", "backpack")
        a = generate_trace(replace(p, yaw_deg=0.0), 20.0, seed=8)
        b = generate_trace(replace(p, yaw_deg=137.0), 20.0, seed=8)
        assert np.abs(a.accel - b.accel).max() > 0.1
        fa = stack_features(trace_frames(resample(a)))
        fb = stack_features(trace_frames(resample(b)))
        np.testing.assert_allclose(fb, fa, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_standing_accel_norm(self, bank, seed):
        for p in bank:
            tr = generate_trace(p, 40.0, seed=seed)
            standing = tr.annotations["activity"] == "standing"
            dev = np.abs(np.linalg.norm(tr.accel[standing], axis=1) - GRAVITY)
            assert np.mean(dev <= 3 * p.noise_sigma["accel"]) >= 0.99

    def test_styles_are_drawn_per_trace(self):
        p = simple(harmonics=[[1.0, 0.0]] * 6, styles=([[0.0, 1.0]] * 6,), standing_fraction=0.0)
        peaks = set()
        for seed in range(12):
            tr = generate_trace(p, 6.0, seed=seed)
            spec = np.abs(direct_dft(tr.accel[:256, 0], 20))
            peaks.add(int(np.argmax(spec[1:])) + 1)
        assert peaks == {5, 10}  # 2 Hz and 4 Hz


class TestSchedule:
    @pytest.mark.parametrize("frac", [0.0, 0.3, 0.7, 1.0])
    def test_standing_fraction(self, frac):
        mask = activity_schedule(6000, 100.0, frac, np.random.default_rng(0))
        assert mask.dtype == bool and mask.size == 6000
        assert np.mean(~mask) == pytest.approx(frac, abs=0.01)


class TestSubjects:
    def test_layout(self, bank):
        traces = generate_subjects(bank, "cyclist", 3, 6.0, seed=7)
        assert len(traces) == 12
        names = [trace_filename(t) for t in traces]
        assert names[0] == "cyclist_cyc00_trouser_front.csv"
        assert len(set(names)) == 12
        # a subject wears all devices during the same activity schedule
        first = [t.annotations["activity"] for t in traces[:4]]
        assert all(np.array_equal(first[0], a) for a in first[1:])
        assert not np.array_equal(traces[0].annotations["activity"], traces[4].annotations["activity"])

    def test_deterministic(self, bank):
        a = generate_subjects(bank, "pedestrian", 2, 6.0, seed=1)
        b = generate_subjects(bank, "pedestrian", 2, 6.0, seed=1)
        assert all(x == y for x, y in zip(a, b))

    def test_jitter_bounds(self, bank):
        p = profile(bank, "pedestrian", "jacket")
        j = jitter_profile(p, 1.1, np.random.default_rng(0))
        assert j.cadence == pytest.approx(2.2)
        ratio = j.amplitudes[p.amplitudes > 0] / p.amplitudes[p.amplitudes > 0]
        assert np.all(np.abs(ratio - 1) <= AMPLITUDE_JITTER)
        assert len(j.styles) == len(p.styles)

    def test_subject_id(self):
        assert subject_id("cyclist", 3) == "cyc03"
        assert subject_id("pedestrian", 12) == "ped12"

    def test_unknown_vru(self, bank):
        with pytest.raises(ProfileError):
            generate_subjects([p for p in bank if p.vru == "cyclist"], "pedestrian", 1, 6.0, seed=0)

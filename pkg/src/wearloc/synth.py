"""Seeded synthetic IMU traces for pedestrians and cyclists.

A trace is gravity plus a sum of cadence harmonics per axis (defined in a
gravity-aligned frame: x forward, y lateral, z up), white sensor noise, and
optional broadband motion noise while moving. A profile may list alternative
wear styles (a second harmonic table, e.g. an open versus a zipped jacket);
each trace picks one of them at random. Moving and standing bouts
alternate according to the profile's ``standing_fraction``. The finished
signal is rotated into the device frame by the location's mounting tilt and
a per-trace random heading.

Subjects are simulated by jittering cadence (shared by all of a subject's
traces) and every harmonic amplitude.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial.transform import Rotation

from .traces import LOCATIONS, VRU_TYPES, RawTrace

GRAVITY = 9.81
CADENCE_JITTER = 0.15
AMPLITUDE_JITTER = 0.20
MIN_DURATION = 5.0
# moving bouts are aimed at roughly this length (seconds)
TYPICAL_BOUT = 15.0
RAMP_SECONDS = 0.25


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class MotionProfile:
    vru: str
    location: str
    cadence: float
    # 6 rows (accel x/y/z, gyro x/y/z) x H harmonics
    harmonics: Tuple[Tuple[float, ...], ...]
    noise_sigma: Dict[str, float]
    motion_noise: Dict[str, float]
    tilt_deg: float = 0.0
    standing_fraction: float = 0.3
    yaw_deg: Optional[float] = None  # None -> random heading per trace
    # alternative 6 x H harmonic tables; each trace draws uniformly from (harmonics, *styles)
    styles: Tuple[Tuple[Tuple[float, ...], ...], ...] = ()

    def __post_init__(self):
        if self.vru not in VRU_TYPES:
            raise ProfileError(f"unknown vru {self.vru!r}")
        if self.location not in LOCATIONS[self.vru]:
            raise ProfileError(f"{self.location!r} is not a {self.vru} location")
        if not self.cadence > 0:
            raise ProfileError("cadence must be positive")
        h = np.asarray(self.harmonics, dtype=float)
        if h.ndim != 2 or h.shape[0] != 6 or h.shape[1] < 1:
            raise ProfileError("harmonics must be 6 rows of equal length")
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ProfileError("harmonic amplitudes must be finite and >= 0")
        object.__setattr__(self, "harmonics", tuple(tuple(float(v) for v in row) for row in h))
        styles = []
        for style in self.styles:
            a = np.asarray(style, dtype=float)
            if a.shape != h.shape or np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ProfileError("each style must be a non-negative table shaped like harmonics")
            styles.append(tuple(tuple(float(v) for v in row) for row in a))
        object.__setattr__(self, "styles", tuple(styles))
        for name in ("noise_sigma", "motion_noise"):
            sig = getattr(self, name)
            if set(sig) != {"accel", "gyro"} or any(not v >= 0 for v in sig.values()):
                raise ProfileError(f"{name} needs non-negative 'accel' and 'gyro' entries")
        if not 0.0 <= self.standing_fraction <= 1.0:
            raise ProfileError("standing_fraction must lie in [0, 1]")

    @property
    def amplitudes(self) -> np.ndarray:
        return np.asarray(self.harmonics, dtype=float)

    @property
    def n_styles(self) -> int:
        return 1 + len(self.styles)

    def style_amplitudes(self, index: int) -> np.ndarray:
        return np.asarray(self.harmonics if index == 0 else self.styles[index - 1], dtype=float)

    @classmethod
    def from_dict(cls, doc: dict) -> "MotionProfile":
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ProfileError(str(exc)) from None


def validate_bank(bank: Sequence[MotionProfile]) -> None:
    for vru in VRU_TYPES:
        profiles = [p for p in bank if p.vru == vru]
        locations = [p.location for p in profiles]
        if len(set(locations)) != len(locations):
            raise ProfileError(f"duplicate {vru} locations in profile bank")
        for i, a in enumerate(profiles):
            for b in profiles[i + 1:]:
                if a.amplitudes.shape == b.amplitudes.shape and np.linalg.norm(a.amplitudes - b.amplitudes) == 0:
                    raise ProfileError(f"{vru} {a.location} and {b.location} share an amplitude signature")


def load_profile_bank(path: Optional[Union[str, Path]] = None) -> List[MotionProfile]:
    """Read a JSON list of profiles; without a path the shipped bank is used."""
    if path is None:
        text = resources.files("wearloc").joinpath("data/profiles.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        docs = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"profile bank is not valid JSON: {exc}") from None
    if not isinstance(docs, list):
        raise ProfileError("profile bank must be a JSON list")
    bank = [MotionProfile.from_dict(d) for d in docs]
    validate_bank(bank)
    return bank


def dump_profile_bank(bank: Sequence[MotionProfile]) -> str:
    return json.dumps([asdict(p) for p in bank], indent=2)


def activity_schedule(n: int, rate: float, standing_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean moving mask: standing gaps before, between and after moving bouts."""
    if standing_fraction >= 1.0:
        return np.zeros(n, dtype=bool)
    if standing_fraction <= 0.0:
        return np.ones(n, dtype=bool)
    duration = n / rate
    moving_total = duration * (1.0 - standing_fraction)
    n_bouts = max(1, round(moving_total / TYPICAL_BOUT))
    gaps = rng.dirichlet(np.full(n_bouts + 1, 2.0)) * (duration - moving_total)
    bouts = rng.dirichlet(np.full(n_bouts, 8.0)) * moving_total
    mask = np.zeros(n, dtype=bool)
    t = 0.0
    for i in range(n_bouts):
        t += gaps[i]
        start, stop = int(round(t * rate)), int(round((t + bouts[i]) * rate))
        mask[start:stop] = True
        t += bouts[i]
    return mask


def _envelope(mask: np.ndarray, rate: float) -> np.ndarray:
    """Motion gain: ramps up over RAMP_SECONDS inside each bout, exactly 0 while standing."""
    if mask.all():
        return np.ones(mask.size)
    width = max(1.0, RAMP_SECONDS * rate)
    return np.minimum(distance_transform_edt(mask) / width, 1.0)


def device_rotation(profile: MotionProfile, yaw_deg: float) -> np.ndarray:
    """Local-to-device rotation: heading about gravity, then the mounting tilt."""
    return Rotation.from_euler("zx", [yaw_deg, profile.tilt_deg], degrees=True).as_matrix()


def generate_trace(profile: MotionProfile, duration: float, seed: int, subject: str = "s00",
                   rate: float = 100.0, schedule_seed: Optional[int] = None) -> RawTrace:
    """Fully annotated synthetic trace of ``round(duration * rate)`` samples.

    ``schedule_seed`` lets several traces share one moving/standing schedule,
    as when a subject wears multiple devices at once.
    """
    if not duration >= MIN_DURATION:
        raise ProfileError(f"duration must be at least {MIN_DURATION} s")
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    sched_rng = np.random.default_rng([schedule_seed if schedule_seed is not None else seed, 1])
    phase_rng = np.random.default_rng([seed, 2])
    noise_rng = np.random.default_rng([seed, 3])
    yaw_rng = np.random.default_rng([seed, 4])
    style_rng = np.random.default_rng([seed, 5])

    moving = activity_schedule(n, rate, profile.standing_fraction, sched_rng)
    env = _envelope(moving, rate)

    amps = profile.style_amplitudes(int(style_rng.integers(profile.n_styles)))
    n_harm = amps.shape[1]
    phases = phase_rng.uniform(0.0, 2.0 * np.pi, size=amps.shape)
    basis = 2.0 * np.pi * profile.cadence * np.outer(np.arange(1, n_harm + 1), t)  # (H, n)
    motion = np.einsum("ch,chn->nc", amps, np.sin(basis[None, :, :] + phases[:, :, None]))
    motion += noise_rng.normal(size=(n, 6)) * np.repeat(
        [profile.motion_noise["accel"], profile.motion_noise["gyro"]], 3)
    motion *= env[:, None]

    local = motion
    local[:, 2] += GRAVITY
    local += noise_rng.normal(size=(n, 6)) * np.repeat(
        [profile.noise_sigma["accel"], profile.noise_sigma["gyro"]], 3)

    yaw = profile.yaw_deg if profile.yaw_deg is not None else float(yaw_rng.uniform(0.0, 360.0))
    rot = device_rotation(profile, yaw)
    accel = local[:, :3] @ rot.T
    gyro = local[:, 3:] @ rot.T

    annotations = {
        "activity": np.where(moving, "moving", "standing"),
        "location": np.full(n, profile.location),
        "subject": np.full(n, subject),
        "vru": np.full(n, profile.vru),
    }
    return RawTrace(t, accel, gyro, annotations)


def jitter_profile(profile: MotionProfile, cadence_factor: float, rng: np.random.Generator) -> MotionProfile:
    """Scale cadence by ``cadence_factor`` and every amplitude (all styles) by a uniform +-20 % factor."""
    factors = rng.uniform(1.0 - AMPLITUDE_JITTER, 1.0 + AMPLITUDE_JITTER, size=profile.amplitudes.shape)
    tables = [tuple(map(tuple, profile.style_amplitudes(i) * factors)) for i in range(profile.n_styles)]
    return replace(profile, cadence=profile.cadence * cadence_factor, harmonics=tables[0], styles=tuple(tables[1:]))


def subject_id(vru: str, index: int) -> str:
    return f"{vru[:3]}{index:02d}"


def generate_subjects(bank: Sequence[MotionProfile], vru: str, n_subjects: int, duration: float,
                      seed: int, rate: float = 100.0) -> List[RawTrace]:
    """One trace per (subject, location) for every ``vru`` profile in the bank."""
    profiles = [p for p in bank if p.vru == vru]
    if not profiles:
        raise ProfileError(f"no {vru} profiles in bank")
    vru_key = VRU_TYPES.index(vru)
    traces = []
    for s in range(n_subjects):
        subj_rng = np.random.default_rng([seed, vru_key, s, 0])
        factor = subj_rng.uniform(1.0 - CADENCE_JITTER, 1.0 + CADENCE_JITTER)
        schedule_seed = int(subj_rng.integers(2 ** 32))
        for p in profiles:
            loc_key = LOCATIONS[vru].index(p.location)
            loc_rng = np.random.default_rng([seed, vru_key, s, loc_key + 1])
            jittered = jitter_profile(p, factor, loc_rng)
            traces.append(generate_trace(jittered, duration, int(loc_rng.integers(2 ** 32)),
                                         subject=subject_id(vru, s), rate=rate, schedule_seed=schedule_seed))
    return traces


def trace_filename(trace: RawTrace) -> str:
    ann = trace.annotations
    return f"{ann['vru'][0]}_{ann['subject'][0]}_{ann['location'][0]}.csv"

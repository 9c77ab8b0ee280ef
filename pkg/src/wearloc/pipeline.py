"""Two-stage wearing-location detection.

Frames (2 Hz) are first classified as moving or standing. The raw decisions
are smoothed over the last five frames, smoothed-moving frames are grouped
into segments of at least five frames (2.5 s), and only frames inside those
segments are passed to the location classifier. Each segment gets one label
by majority vote over its frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import HOP, N_BINS, WINDOW_LEN, Frame, extract_frames, features_per_channel, stack_features
from .forest import ModelError, RandomForestModel
from .preprocess import CHANNELS, DEFAULT_TIME_CONSTANT, transform_trace
from .traces import LOCATIONS, UniformTrace

MOVING_VOCABULARY = ("standing", "moving")


def location_vocabulary(vru: str) -> Tuple[str, ...]:
    try:
        return LOCATIONS[vru]
    except KeyError:
        raise ValueError(f"unknown vru type {vru!r}") from None


@dataclass(frozen=True)
class LocationLabel:
    vru: str
    label: str

    def __post_init__(self):
        if self.label not in location_vocabulary(self.vru):
            raise ValueError(f"{self.label!r} is not a {self.vru} wearing location")

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class PipelineConfig:
    rate: float = 100.0
    window_len: int = WINDOW_LEN
    hop: int = HOP
    n_bins: int = N_BINS
    gravity_time_constant: float = DEFAULT_TIME_CONSTANT
    smoothing_len: int = 5
    smoothing_min_moving: int = 4  # 4 of 5 = 80 %, inclusive
    min_segment_frames: int = 5

    def __post_init__(self):
        for name in ("rate", "window_len", "hop", "n_bins", "gravity_time_constant",
                     "smoothing_len", "smoothing_min_moving", "min_segment_frames"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.smoothing_min_moving > self.smoothing_len:
            raise ValueError("smoothing_min_moving cannot exceed smoothing_len")

    @property
    def feature_dim(self) -> int:
        return len(CHANNELS) * features_per_channel(self.n_bins)


DEFAULT_CONFIG = PipelineConfig()


class ModelKindError(ModelError):
    pass


def _require_kind(model: RandomForestModel, kind: str) -> None:
    if model.kind != kind:
        raise ModelKindError(f"expected a {kind} model, got a {model.kind} model")


# ---------------------------------------------------------------------------
# stage operations
# ---------------------------------------------------------------------------


def classify_moving_frame(model: RandomForestModel, frame: Frame) -> Tuple[bool, float]:
    _require_kind(model, "moving")
    proba = model.predict_proba(frame.features)[0]
    moving = model.label_vocabulary[int(np.argmax(proba))] == "moving"
    return moving, float(proba[model.label_vocabulary.index("moving")])


def smooth_moving(history: Sequence[bool], length: int = 5, min_moving: int = 4) -> bool:
    """True once the last ``length`` raw decisions hold at least ``min_moving`` moving frames.

    During warm-up (fewer than ``length`` decisions) the answer is always False.
    """
    if len(history) < 1:
        raise ValueError("history must not be empty")
    if len(history) < length:
        return False
    return sum(bool(h) for h in list(history)[-length:]) >= min_moving


def smooth_sequence(raw: Sequence[bool], length: int = 5, min_moving: int = 4) -> np.ndarray:
    raw = list(raw)
    return np.array([smooth_moving(raw[max(0, i + 1 - length): i + 1], length, min_moving)
                     for i in range(len(raw))], dtype=bool)


def segment_moving(smoothed: Sequence[bool], min_len: int = 5) -> List[Tuple[int, int]]:
    """Maximal runs of True as inclusive ``(start, end)`` pairs; short runs are dropped."""
    runs = []
    start = None
    for i, flag in enumerate(list(smoothed) + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start >= min_len:
                runs.append((start, i - 1))
            start = None
    return runs


def classify_location_frame(model: RandomForestModel, frame: Frame) -> Tuple[str, np.ndarray]:
    _require_kind(model, "location")
    proba = model.predict_proba(frame.features)[0]
    return model.label_vocabulary[int(np.argmax(proba))], proba


def vote_segment(frame_labels: Sequence[str], frame_probs: Sequence[Sequence[float]],
                 vocabulary: Sequence[str]) -> str:
    """Majority vote; ties go to the larger summed probability, then to the lower class index."""
    vocabulary = list(vocabulary)
    votes = np.zeros(len(vocabulary), dtype=int)
    for label in frame_labels:
        votes[vocabulary.index(label)] += 1
    prob_sum = np.sum(np.asarray(frame_probs, dtype=float).reshape(len(frame_labels), -1), axis=0)
    best = max(range(len(vocabulary)), key=lambda i: (votes[i], prob_sum[i], -i))
    return vocabulary[best]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class FrameDecision:
    i: int
    t: float
    moving_raw: bool
    p_moving: float
    moving_smoothed: bool
    location: Optional[str] = None
    probs: Optional[np.ndarray] = None


@dataclass
class MovingSegment:
    start_frame: int
    end_frame: int
    frame_labels: List[str]
    frame_probs: np.ndarray
    segment_label: str

    def __len__(self) -> int:
        return self.end_frame - self.start_frame + 1

    def votes(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for label in self.frame_labels:
            out[label] = out.get(label, 0) + 1
        return out


@dataclass
class DetectionReport:
    frames: List[FrameDecision] = field(default_factory=list)
    segments: List[MovingSegment] = field(default_factory=list)
    vocabulary: Tuple[str, ...] = ()
    vru: Optional[str] = None

    def to_dict(self) -> dict:
        frames = []
        for f in self.frames:
            entry = {"i": f.i, "t": f.t, "moving_raw": f.moving_raw, "p_moving": f.p_moving,
                     "moving_smoothed": f.moving_smoothed}
            if f.location is not None:
                entry["location"] = f.location
                entry["probs"] = {c: float(p) for c, p in zip(self.vocabulary, f.probs)}
            frames.append(entry)
        segments = [{"start": s.start_frame, "end": s.end_frame, "label": s.segment_label,
                     "votes": s.votes()} for s in self.segments]
        doc = {"frames": frames, "segments": segments}
        if self.vru is not None:
            doc["vru"] = self.vru
        return doc

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def check_models(moving_model: RandomForestModel, location_model: RandomForestModel,
                 config: PipelineConfig = DEFAULT_CONFIG, vru: Optional[str] = None) -> None:
    """Fail fast on model kind, feature layout or vru mismatches."""
    _require_kind(moving_model, "moving")
    _require_kind(location_model, "location")
    for m in (moving_model, location_model):
        if m.feature_dim != config.feature_dim:
            raise ModelError(f"{m.kind} model expects {m.feature_dim} features, pipeline produces {config.feature_dim}")
    if tuple(moving_model.label_vocabulary) != MOVING_VOCABULARY:
        raise ModelError(f"moving model vocabulary must be {MOVING_VOCABULARY}")
    model_vru = location_model.vru
    if model_vru is None:
        matches = [v for v, labels in LOCATIONS.items() if tuple(labels) == location_model.label_vocabulary]
        model_vru = matches[0] if matches else None
    if vru is not None and model_vru is not None and vru != model_vru:
        raise ModelError(f"location model is for {model_vru}, trace is {vru}")
    if moving_model.vru is not None and model_vru is not None and moving_model.vru != model_vru:
        raise ModelError(f"moving model is for {moving_model.vru}, location model for {model_vru}")


def detect(features: np.ndarray, times: Sequence[float], moving_model: RandomForestModel,
           location_model: RandomForestModel, config: PipelineConfig = DEFAULT_CONFIG) -> DetectionReport:
    """Run both stages on precomputed frame features, one row per frame."""
    check_models(moving_model, location_model, config)
    features = np.asarray(features, dtype=float).reshape(-1, config.feature_dim)
    vocab = location_model.label_vocabulary
    report = DetectionReport(vocabulary=vocab, vru=location_model.vru)
    n = features.shape[0]
    if n == 0:
        return report

    moving_idx = MOVING_VOCABULARY.index("moving")
    proba = moving_model.predict_proba(features)
    p_moving = proba[:, moving_idx]
    raw = np.argmax(proba, axis=1) == moving_idx
    smooth = smooth_sequence(raw, config.smoothing_len, config.smoothing_min_moving)
    report.frames = [FrameDecision(i, float(times[i]), bool(raw[i]), float(p_moving[i]), bool(smooth[i]))
                     for i in range(n)]

    runs = segment_moving(smooth, config.min_segment_frames)
    if not runs:
        return report
    inside = np.concatenate([np.arange(s, e + 1) for s, e in runs])
    labels, loc_proba = location_model.predict(features[inside])
    by_frame = {int(i): (str(l), p) for i, l, p in zip(inside, labels, loc_proba)}
    for s, e in runs:
        frame_labels = [by_frame[i][0] for i in range(s, e + 1)]
        frame_probs = np.array([by_frame[i][1] for i in range(s, e + 1)])
        label = vote_segment(frame_labels, frame_probs, vocab)
        report.segments.append(MovingSegment(s, e, frame_labels, frame_probs, label))
        for i in range(s, e + 1):
            report.frames[i].location, report.frames[i].probs = by_frame[i]
    return report


def trace_frames(trace: UniformTrace, config: PipelineConfig = DEFAULT_CONFIG) -> List[Frame]:
    if trace.rate != config.rate:
        raise ValueError(f"trace rate {trace.rate} Hz does not match pipeline rate {config.rate} Hz")
    channels = transform_trace(trace, config.gravity_time_constant)
    return extract_frames(channels, trace.rate, trace.start_t, config.window_len, config.hop, config.n_bins)


def run_pipeline(trace: UniformTrace, moving_model: RandomForestModel, location_model: RandomForestModel,
                 config: PipelineConfig = DEFAULT_CONFIG) -> DetectionReport:
    check_models(moving_model, location_model, config, vru=trace.annotation("vru"))
    frames = trace_frames(trace, config)
    return detect(stack_features(frames, config.feature_dim), [f.t_center for f in frames],
                  moving_model, location_model, config)

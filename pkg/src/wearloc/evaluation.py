"""Metrics, subject-wise folds, coarse-to-fine grid search and nested cross-validation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .features import Frame, stack_features
from .forest import ForestParams, RandomForestModel, train_forest
from .pipeline import (DEFAULT_CONFIG, MOVING_VOCABULARY, DetectionReport, PipelineConfig, detect,
                       location_vocabulary, trace_frames, vote_segment)
from .traces import UniformTrace


class EvaluationError(ValueError):
    pass


class LeakageError(AssertionError):
    """A subject appeared on both sides of a train/validation/test split."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    labels: Tuple[str, ...]
    counts: np.ndarray  # rows = truth, columns = prediction

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if tuple(other.labels) != tuple(self.labels):
            raise EvaluationError("cannot add confusion matrices over different labels")
        return ConfusionMatrix(self.labels, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.tolist()}


def confusion(truth: Sequence[str], pred: Sequence[str], vocab: Sequence[str]) -> ConfusionMatrix:
    truth, pred = list(truth), list(pred)
    if len(truth) != len(pred):
        raise EvaluationError(f"length mismatch: {len(truth)} truths vs {len(pred)} predictions")
    index = {c: i for i, c in enumerate(vocab)}
    counts = np.zeros((len(vocab), len(vocab)), dtype=np.int64)
    for t, p in zip(truth, pred):
        if t not in index or p not in index:
            raise EvaluationError(f"unknown label {t if t not in index else p!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(vocab), counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: Dict[str, ClassMetrics]

    def to_dict(self) -> dict:
        doc = {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}
        doc["per_class"] = {k: asdict(v) for k, v in self.per_class.items()}
        return doc


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def metrics(cm: ConfusionMatrix) -> MetricReport:
    """Accuracy plus per-class and support-weighted precision, recall and F1."""
    counts = np.asarray(cm.counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise EvaluationError("metrics of an empty confusion matrix")
    diag = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    per_class = {}
    p_arr, r_arr, f_arr = [], [], []
    for i, label in enumerate(cm.labels):
        p = _ratio(diag[i], predicted[i])
        r = _ratio(diag[i], support[i])
        f = _ratio(2 * p * r, p + r)
        per_class[label] = ClassMetrics(p, r, f, int(support[i]))
        p_arr.append(p)
        r_arr.append(r)
        f_arr.append(f)
    w = support / total
    return MetricReport(float(diag.sum() / total), float(np.dot(w, p_arr)), float(np.dot(w, r_arr)),
                        float(np.dot(w, f_arr)), per_class)


def render_table(report: MetricReport, title: Optional[str] = None) -> str:
    rows = [("Accuracy", report.accuracy), ("Precision", report.precision),
            ("Recall", report.recall), ("F1-Score", report.f1)]
    lines = [title] if title else []
    lines += ["| Score     | Evaluation |", "|-----------|------------|"]
    lines += [f"| {name:<9} | {value:>10.3f} |" for name, value in rows]
    return "\n".join(lines)


def render_confusion(cm: ConfusionMatrix) -> str:
    width = max(len(c) for c in cm.labels) + 2
    head = " " * width + "".join(f"{c:>{width}}" for c in cm.labels)
    body = [f"{c:<{width}}" + "".join(f"{v:>{width}d}" for v in row) for c, row in zip(cm.labels, cm.counts.tolist())]
    return "\n".join(["truth \\ predicted", head] + body)


# ---------------------------------------------------------------------------
# folds and grid search
# ---------------------------------------------------------------------------


def subject_folds(subjects: Iterable[str], k: int, seed: int) -> List[Tuple[str, ...]]:
    """Shuffle the distinct subjects with ``seed`` and cut them into ``k`` near-equal folds."""
    unique = sorted(set(subjects))
    if k < 1 or k > len(unique):
        raise EvaluationError(f"cannot form {k} folds from {len(unique)} subjects")
    order = np.random.default_rng(seed).permutation(len(unique))
    return [tuple(unique[i] for i in part) for part in np.array_split(order, k)]


Score = Tuple[float, float]  # (weighted F1, accuracy)
Evaluator = Callable[[List[ForestParams], Tuple[str, ...], Tuple[str, ...]], List[Score]]


def _geometric_mid(a: int, b: int) -> int:
    return int(round(math.sqrt(a * b)))


@dataclass(frozen=True)
class ParamGrid:
    """Axis values of a forest grid; ``None`` in ``max_depth`` means unlimited."""

    n_trees: Tuple[int, ...] = (50, 100, 200)
    max_depth: Tuple[Optional[int], ...] = (8, 16, None)
    min_samples_leaf: Tuple[int, ...] = (1, 4, 16)

    def __post_init__(self):
        if not (self.n_trees and self.max_depth and self.min_samples_leaf):
            raise EvaluationError("empty grid")

    def points(self, base: ForestParams) -> List[ForestParams]:
        return [replace(base, n_trees=t, max_depth=d, min_samples_leaf=m)
                for t in self.n_trees for d in self.max_depth for m in self.min_samples_leaf]

    def refine(self, winner: ForestParams) -> "ParamGrid":
        """Winner plus the midpoints towards its neighbours on every axis.

        Midpoints are geometric for tree counts and leaf sizes and arithmetic
        for depth; for that purpose "unlimited" depth counts as twice the
        largest finite depth on the axis. Edges are not extrapolated.
        """
        def around(values, value, mid):
            vals = sorted(set(values), key=lambda v: math.inf if v is None else v)
            j = vals.index(value)
            out = {value}
            if j > 0:
                out.add(mid(vals[j - 1], value))
            if j < len(vals) - 1:
                out.add(mid(value, vals[j + 1]))
            return tuple(sorted(out, key=lambda v: math.inf if v is None else v))

        finite = [d for d in self.max_depth if d is not None]
        cap = 2 * max(finite) if finite else None

        def depth_mid(a, b):
            a_ = cap if a is None else a
            b_ = cap if b is None else b
            return (a_ + b_) // 2

        return ParamGrid(around(self.n_trees, winner.n_trees, _geometric_mid),
                         around(self.max_depth, winner.max_depth, depth_mid),
                         around(self.min_samples_leaf, winner.min_samples_leaf, _geometric_mid))

    def to_dict(self) -> dict:
        return {"n_trees": list(self.n_trees), "max_depth": list(self.max_depth),
                "min_samples_leaf": list(self.min_samples_leaf)}


@dataclass
class GridSearchResult:
    best: ForestParams
    best_score: Score
    coarse: List[ForestParams]
    fine: List[ForestParams]
    scores: Dict[ForestParams, Score] = field(default_factory=dict)


def _rank(item: Tuple[ForestParams, Score]):
    params, (f1, acc) = item
    return (-f1, -acc, params.key())


def grid_search(evaluate: Evaluator, grid: ParamGrid, folds: Sequence[Sequence[str]],
                base: ForestParams = ForestParams(), refine: bool = True) -> GridSearchResult:
    """Pick forest parameters by mean inner-fold (weighted F1, accuracy).

    ``evaluate(points, train_subjects, val_subjects)`` returns one score per
    point. Ties go to the lexicographically smaller (n_trees, max_depth,
    min_samples_leaf) tuple, so the result does not depend on enumeration order.
    """
    folds = [tuple(f) for f in folds]
    if len(folds) < 2:
        raise EvaluationError("grid search needs at least two folds")
    scores: Dict[ForestParams, Score] = {}

    def score(points: List[ForestParams]) -> None:
        todo = [p for p in dict.fromkeys(points) if p not in scores]
        if not todo:
            return
        acc = np.zeros((len(todo), 2))
        for j, val in enumerate(folds):
            train = tuple(s for i, f in enumerate(folds) if i != j for s in f)
            acc += np.asarray(evaluate(todo, train, val), dtype=float).reshape(len(todo), 2)
        for p, (f1, a) in zip(todo, acc / len(folds)):
            scores[p] = (float(f1), float(a))

    coarse = grid.points(base)
    score(coarse)
    best = min(((p, scores[p]) for p in coarse), key=_rank)[0]
    fine: List[ForestParams] = []
    if refine:
        fine = grid.refine(best).points(base)
        score(fine)
        best = min(((p, scores[p]) for p in set(coarse) | set(fine)), key=_rank)[0]
    return GridSearchResult(best, scores[best], coarse, fine, scores)


class ForestEvaluator:
    """Grid-search scorer: frame-level (weighted F1, accuracy) on validation subjects.

    Points that differ only in ``n_trees`` and ``max_depth`` share one
    unlimited-depth forest with the largest tree count; smaller forests are
    its prefixes and depth limits are applied by truncation, both of which
    reproduce separate training exactly.
    """

    def __init__(self, X: np.ndarray, labels: np.ndarray, groups: np.ndarray, vocabulary: Sequence[str],
                 kind: str):
        self.X = np.asarray(X, dtype=float)
        self.labels = np.asarray(labels, dtype=str)
        self.groups = np.asarray(groups, dtype=str)
        self.vocabulary = tuple(vocabulary)
        self.kind = kind
        self.calls: List[Tuple[frozenset, frozenset]] = []
        self._cache: Dict[tuple, RandomForestModel] = {}

    def __call__(self, points, train_subjects, val_subjects) -> List[Score]:
        train = np.isin(self.groups, list(train_subjects))
        val = np.isin(self.groups, list(val_subjects))
        self.calls.append((frozenset(self.groups[train].tolist()), frozenset(self.groups[val].tolist())))
        Xv = self.X[val]
        yv = self.labels[val]
        out: Dict[ForestParams, Score] = {}
        groups: Dict[ForestParams, List[ForestParams]] = {}
        for p in points:
            groups.setdefault(replace(p, n_trees=1, max_depth=None), []).append(p)
        for key, members in groups.items():
            n_max = max(p.n_trees for p in members)
            cache_key = (key, tuple(sorted(train_subjects)))
            model = self._cache.get(cache_key)
            if model is None or len(model.trees) < n_max:
                model = train_forest(self.X[train], self.labels[train], replace(key, n_trees=n_max),
                                     self.vocabulary, kind=self.kind)
                self._cache[cache_key] = model
            for depth in {p.max_depth for p in members}:
                per_tree = np.stack([t.predict_proba(Xv, depth) for t in model.trees[:n_max]])
                cum = np.cumsum(per_tree, axis=0)
                for p in members:
                    if p.max_depth != depth:
                        continue
                    pred = np.asarray(self.vocabulary)[np.argmax(cum[p.n_trees - 1], axis=1)]
                    rep = metrics(confusion(yv, pred, self.vocabulary))
                    out[p] = (rep.f1, rep.accuracy)
        return [out[p] for p in points]


# ---------------------------------------------------------------------------
# nearest-centroid baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NearestCentroid:
    vocabulary: Tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    centroids: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, labels: Sequence[str], vocabulary: Sequence[str]) -> "NearestCentroid":
        X = np.asarray(X, dtype=float)
        labels = np.asarray(labels, dtype=str)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        Z = (X - mean) / scale
        cents = np.stack([Z[labels == c].mean(axis=0) if np.any(labels == c) else np.full(X.shape[1], np.inf)
                          for c in vocabulary])
        return cls(tuple(vocabulary), mean, scale, cents)

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        d = ((Z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.asarray(self.vocabulary)[np.argmin(d, axis=1)]


# ---------------------------------------------------------------------------
# labelled frame data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TraceFrames:
    """Features and per-frame ground truth of one annotated trace."""

    name: str
    subject: str
    location: str
    features: np.ndarray
    times: np.ndarray
    moving: np.ndarray  # True iff > 50 % of the window's samples are annotated moving

    def __len__(self) -> int:
        return self.features.shape[0]


def label_frames(trace: UniformTrace, config: PipelineConfig = DEFAULT_CONFIG, name: str = "") -> TraceFrames:
    for col in ("activity", "location", "subject"):
        if col not in trace.annotations:
            raise EvaluationError(f"trace {name or '?'} lacks the {col!r} annotation")
    subject = trace.annotation("subject")
    location = trace.annotation("location")
    if subject is None or location is None:
        raise EvaluationError(f"trace {name or '?'} must have a single subject and location")
    frames: List[Frame] = trace_frames(trace, config)
    moving_samples = np.concatenate([[0], np.cumsum(trace.annotations["activity"] == "moving")])
    stops = np.array([f.stop for f in frames], dtype=int)
    frac = (moving_samples[stops] - moving_samples[stops - config.window_len]) / config.window_len
    return TraceFrames(name, subject, location, stack_features(frames, config.feature_dim),
                       np.array([f.t_center for f in frames]), frac > 0.5)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Frames of many traces stacked row-wise with their subject and labels."""

    features: np.ndarray
    subjects: np.ndarray
    moving: np.ndarray
    locations: np.ndarray

    @property
    def moving_labels(self) -> np.ndarray:
        return np.where(self.moving, "moving", "standing")


def training_set(data: Sequence[TraceFrames]) -> TrainingSet:
    if not data:
        raise EvaluationError("no traces to train on")
    return TrainingSet(np.concatenate([d.features for d in data]),
                       np.concatenate([[d.subject] * len(d) for d in data]).astype(str),
                       np.concatenate([d.moving for d in data]),
                       np.concatenate([[d.location] * len(d) for d in data]).astype(str))


@dataclass
class EvaluationReport:
    vru: str
    segments: ConfusionMatrix
    moving_frames: ConfusionMatrix
    location_frames: ConfusionMatrix
    n_traces: int

    def to_dict(self) -> dict:
        doc = {"vru": self.vru, "n_traces": self.n_traces}
        for name in ("segments", "moving_frames", "location_frames"):
            cm = getattr(self, name)
            doc[name] = {"confusion": cm.to_dict(), "metrics": metrics(cm).to_dict() if cm.total else None}
        return doc


def _score_traces(data: Sequence[TraceFrames], moving_model, location_model, config, vocab,
                  baseline: Optional[NearestCentroid] = None):
    seg_truth, seg_pred, base_pred = [], [], []
    mov_truth, mov_pred = [], []
    loc_truth, loc_pred = [], []
    for d in data:
        report = detect(d.features, d.times, moving_model, location_model, config)
        for seg in report.segments:
            seg_truth.append(d.location)
            seg_pred.append(seg.segment_label)
            if baseline is not None:
                labels = baseline.predict(d.features[seg.start_frame: seg.end_frame + 1])
                onehot = np.array([[float(l == c) for c in vocab] for l in labels])
                base_pred.append(vote_segment(list(labels), onehot, vocab))
        mov_truth += np.where(d.moving, "moving", "standing").tolist()
        mov_pred += ["moving" if f.moving_raw else "standing" for f in report.frames]
        if d.moving.any():
            loc_truth += [d.location] * int(d.moving.sum())
            loc_pred += location_model.predict(d.features[d.moving])[0].tolist()
    return (confusion(seg_truth, seg_pred, vocab), confusion(mov_truth, mov_pred, MOVING_VOCABULARY),
            confusion(loc_truth, loc_pred, vocab),
            confusion(seg_truth, base_pred, vocab) if baseline is not None else None)


def evaluate_models(traces: Sequence[UniformTrace], moving_model: RandomForestModel,
                    location_model: RandomForestModel, config: PipelineConfig = DEFAULT_CONFIG) -> EvaluationReport:
    """Score segment and frame predictions of a trained pipeline against trace annotations."""
    data = [label_frames(t, config) for t in traces]
    vocab = location_model.label_vocabulary
    segs, mov, loc, _ = _score_traces(data, moving_model, location_model, config, vocab)
    vru = location_model.vru or ""
    return EvaluationReport(vru, segs, mov, loc, len(data))


# ---------------------------------------------------------------------------
# nested cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    index: int
    test_subjects: Tuple[str, ...]
    train_subjects: Tuple[str, ...]
    inner_folds: List[Tuple[str, ...]]
    moving_params: ForestParams
    location_params: ForestParams
    segments: ConfusionMatrix
    moving_frames: ConfusionMatrix
    location_frames: ConfusionMatrix
    baseline_segments: Optional[ConfusionMatrix]
    # (train subjects, validation subjects) actually used by every fitting call
    fit_calls: List[Tuple[frozenset, frozenset]] = field(default_factory=list)
    report_invariants_ok: bool = True

    def to_dict(self) -> dict:
        doc = {
            "fold": self.index,
            "test_subjects": list(self.test_subjects),
            "train_subjects": list(self.train_subjects),
            "inner_folds": [list(f) for f in self.inner_folds],
            "moving_params": asdict(self.moving_params),
            "location_params": asdict(self.location_params),
            "segments": self.segments.to_dict(),
            "n_segments": self.segments.total,
            "metrics": metrics(self.segments).to_dict() if self.segments.total else None,
        }
        if self.baseline_segments is not None:
            doc["baseline_segments"] = self.baseline_segments.to_dict()
        return doc


def check_leakage(fold: FoldResult) -> None:
    test = set(fold.test_subjects)
    train = set(fold.train_subjects)
    if test & train:
        raise LeakageError(f"fold {fold.index}: test subjects {sorted(test & train)} used for training")
    inner = [set(f) for f in fold.inner_folds]
    if set().union(*inner) != train:
        raise LeakageError(f"fold {fold.index}: inner folds do not partition the training subjects")
    for a in range(len(inner)):
        for b in range(a + 1, len(inner)):
            if inner[a] & inner[b]:
                raise LeakageError(f"fold {fold.index}: inner folds overlap")
    for fit_train, fit_val in fold.fit_calls:
        if fit_train & test or fit_val & test:
            raise LeakageError(f"fold {fold.index}: test subject seen during model selection or fitting")
        if fit_train & fit_val:
            raise LeakageError(f"fold {fold.index}: validation subjects {sorted(fit_train & fit_val)} in training")


def _report_invariants(report: DetectionReport, min_len: int) -> bool:
    in_segment = set()
    for seg in report.segments:
        if len(seg) < min_len:
            return False
        for i in range(seg.start_frame, seg.end_frame + 1):
            if not report.frames[i].moving_smoothed:
                return False
            in_segment.add(i)
    return all(f.location is None for f in report.frames if f.i not in in_segment)


@dataclass(frozen=True)
class NestedCVSettings:
    vru: str
    grid: ParamGrid = ParamGrid()
    base_params: ForestParams = ForestParams()
    config: PipelineConfig = DEFAULT_CONFIG
    seed: int = 0
    outer_k: int = 5
    inner_k: int = 5
    refine: bool = True
    baseline: bool = True


def _outer_fold(index: int, data: Sequence[TraceFrames], test: Tuple[str, ...],
                settings: NestedCVSettings) -> FoldResult:
    vocab = location_vocabulary(settings.vru)
    train_data = [d for d in data if d.subject not in test]
    test_data = [d for d in data if d.subject in test]
    train = tuple(sorted({d.subject for d in train_data}))
    inner = subject_folds(train, settings.inner_k, settings.seed + 1 + index)
    base = replace(settings.base_params, seed=settings.seed)

    ts = training_set(train_data)
    X, groups, moving, loc_labels = ts.features, ts.subjects, ts.moving, ts.locations
    moving_labels = ts.moving_labels

    mov_eval = ForestEvaluator(X, moving_labels, groups, MOVING_VOCABULARY, "moving")
    mov_search = grid_search(mov_eval, settings.grid, inner, base, settings.refine)
    loc_eval = ForestEvaluator(X[moving], loc_labels[moving], groups[moving], vocab, "location")
    loc_search = grid_search(loc_eval, settings.grid, inner, base, settings.refine)

    moving_model = train_forest(X, moving_labels, mov_search.best, MOVING_VOCABULARY, "moving", settings.vru)
    location_model = train_forest(X[moving], loc_labels[moving], loc_search.best, vocab, "location", settings.vru)
    fit_calls = mov_eval.calls + loc_eval.calls
    fit_calls.append((frozenset(groups.tolist()), frozenset()))

    baseline = NearestCentroid.fit(X[moving], loc_labels[moving], vocab) if settings.baseline else None
    segs, mov, loc, base_segs = _score_traces(test_data, moving_model, location_model, settings.config,
                                              vocab, baseline)
    ok = all(_report_invariants(detect(d.features, d.times, moving_model, location_model, settings.config),
                                settings.config.min_segment_frames) for d in test_data)
    return FoldResult(index, tuple(test), train, [tuple(f) for f in inner], mov_search.best, loc_search.best,
                      segs, mov, loc, base_segs, fit_calls, ok)


@dataclass
class NestedCVReport:
    vru: str
    seed: int
    folds: List[FoldResult]
    grid: ParamGrid

    def _sum(self, attr: str) -> ConfusionMatrix:
        cms = [getattr(f, attr) for f in self.folds]
        total = cms[0]
        for cm in cms[1:]:
            total = total + cm
        return total

    @property
    def segments(self) -> ConfusionMatrix:
        return self._sum("segments")

    @property
    def baseline_segments(self) -> Optional[ConfusionMatrix]:
        if any(f.baseline_segments is None for f in self.folds):
            return None
        return self._sum("baseline_segments")

    @property
    def metrics(self) -> MetricReport:
        return metrics(self.segments)

    def to_dict(self) -> dict:
        doc = {
            "vru": self.vru,
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "segments": {"confusion": self.segments.to_dict(), "metrics": self.metrics.to_dict()},
            "moving_frames": {"confusion": self._sum("moving_frames").to_dict(),
                              "metrics": metrics(self._sum("moving_frames")).to_dict()},
            "location_frames": {"confusion": self._sum("location_frames").to_dict(),
                                "metrics": metrics(self._sum("location_frames")).to_dict()},
            "folds": [f.to_dict() for f in self.folds],
        }
        base = self.baseline_segments
        if base is not None:
            doc["baseline_segments"] = {"confusion": base.to_dict(), "metrics": metrics(base).to_dict()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def render(self) -> str:
        parts = [render_table(self.metrics, f"{self.vru} segment-based wearing location classification"),
                 "", render_confusion(self.segments)]
        base = self.baseline_segments
        if base is not None:
            parts += ["", f"nearest-centroid baseline accuracy: {metrics(base).accuracy:.3f}"]
        return "\n".join(parts)


def min_subjects(outer_k: int, inner_k: int) -> int:
    """Fewest subjects for which the smallest outer training split still has ``inner_k`` subjects."""
    n = outer_k
    while n - -(-n // outer_k) < inner_k:
        n += 1
    return n


def nested_cv(traces: Sequence[UniformTrace], settings: NestedCVSettings, jobs: int = 1,
              names: Optional[Sequence[str]] = None) -> NestedCVReport:
    """Outer k-fold over subjects for testing, inner k-fold grid search for model selection.

    Both moving and location models are tuned and retrained inside every
    outer fold; the outer test subjects never reach any fitting call.
    """
    names = list(names) if names is not None else [f"trace{i}" for i in range(len(traces))]
    data = [label_frames(t, settings.config, n) for t, n in zip(traces, names)]
    for d, t in zip(data, traces):
        if t.annotation("vru") not in (None, settings.vru):
            raise EvaluationError(f"trace {d.name} is not a {settings.vru} trace")
    subjects = sorted({d.subject for d in data})
    need = min_subjects(settings.outer_k, settings.inner_k)
    if len(subjects) < need:
        raise EvaluationError(f"{settings.outer_k}x{settings.inner_k} nested CV needs at least {need} subjects, "
                              f"got {len(subjects)}")
    outer = subject_folds(subjects, settings.outer_k, settings.seed)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_outer_fold, i, data, test, settings) for i, test in enumerate(outer)]
            folds = [f.result() for f in futures]
    else:
        folds = [_outer_fold(i, data, test, settings) for i, test in enumerate(outer)]
    for fold in folds:
        check_leakage(fold)
    return NestedCVReport(settings.vru, settings.seed, folds, settings.grid)

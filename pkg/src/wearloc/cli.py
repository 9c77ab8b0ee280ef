"""``wearloc`` command line: synth | train-moving | train-location | run | evaluate | nested-cv.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 model error.
A JSON config file (``--config``) may hold ``pipeline``, ``forest`` and ``grid``
objects plus ``seed`` and ``vru``; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .evaluation import (EvaluationError, ForestEvaluator, NestedCVSettings, ParamGrid, evaluate_models,
                         grid_search, label_frames, metrics, nested_cv, render_confusion, render_table, subject_folds,
                         training_set)
from .forest import ForestParams, ModelError, load_model, save_model, train_forest
from .pipeline import MOVING_VOCABULARY, PipelineConfig, check_models, location_vocabulary, run_pipeline
from .preprocess import GravityError
from .synth import ProfileError, generate_subjects, load_profile_bank, trace_filename
from .traces import VRU_TYPES, TraceFormatError, UniformTrace, read_trace, resample, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    vru: Optional[str] = None
    seed: int = 0
    forest: ForestParams = ForestParams()
    grid: ParamGrid = ParamGrid()
    pipeline: PipelineConfig = PipelineConfig()
    paths: dict = field(default_factory=dict)


_PIPELINE_FLAGS = {
    "rate": float, "window_len": int, "hop": int, "n_bins": int, "gravity_time_constant": float,
    "smoothing_len": int, "smoothing_min_moving": int, "min_segment_frames": int,
}
_PATH_FLAGS = ("data", "out", "trace", "moving", "location", "profiles")
_FOREST_FLAGS = {"n_trees": int, "max_depth": int, "min_samples_leaf": int, "features_per_split": int}


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {what} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {what} config: {exc}") from None


def _grid(doc: dict) -> ParamGrid:
    try:
        return _build(ParamGrid, {k: tuple(v) for k, v in doc.items()}, "grid")
    except EvaluationError as exc:
        raise UsageError(str(exc)) from None


def load_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text("utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(doc) - {"pipeline", "forest", "grid", "seed", "vru"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")

    pipeline = dict(doc.get("pipeline", {}))
    forest = dict(doc.get("forest", {}))
    for name in _PIPELINE_FLAGS:
        if getattr(args, name, None) is not None:
            pipeline[name] = getattr(args, name)
    for name in _FOREST_FLAGS:
        if getattr(args, name, None) is not None:
            forest[name] = getattr(args, name)
    if getattr(args, "unlimited_depth", False):
        forest["max_depth"] = None

    seed = args.seed if getattr(args, "seed", None) is not None else doc.get("seed", 0)
    vru = getattr(args, "vru", None) or doc.get("vru")
    if vru is not None and vru not in VRU_TYPES:
        raise UsageError(f"unknown vru {vru!r}")
    if not isinstance(seed, int) or seed < 0:
        raise UsageError("seed must be a non-negative integer")
    paths = {k: getattr(args, k) for k in _PATH_FLAGS if getattr(args, k, None) is not None}
    return RunConfig(vru=vru, seed=seed, paths=paths, forest=_build(ForestParams, forest, "forest"),
                     grid=_grid(doc["grid"]) if "grid" in doc else ParamGrid(),
                     pipeline=_build(PipelineConfig, pipeline, "pipeline"))


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------


def _read(path: Path) -> UniformTrace:
    try:
        raw = read_trace(path)
    except OSError as exc:
        raise DataError(f"cannot read trace {path}: {exc.strerror or exc}") from None
    except TraceFormatError as exc:
        raise DataError(f"{path.name}: {exc}") from None
    return raw


def load_traces(directory: str, vru: Optional[str], rate: float) -> Tuple[List[UniformTrace], List[str]]:
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"data directory {directory} does not exist")
    paths = sorted(root.glob("*.csv"))
    traces, names = [], []
    for path in paths:
        raw = _read(path)
        if vru is not None and raw.annotations.get("vru") is not None and raw.annotations["vru"][0] != vru:
            continue
        traces.append(resample(raw, rate))
        names.append(path.name)
    if not traces:
        raise DataError(f"no {vru + ' ' if vru else ''}traces found in {directory}")
    return traces, names


def _single_vru(traces: Sequence[UniformTrace], requested: Optional[str]) -> str:
    found = {t.annotation("vru") for t in traces}
    if requested is not None:
        return requested
    if len(found) != 1 or None in found:
        raise UsageError("traces mix vru types; pass --vru")
    return found.pop()


def _load_model(path: str):
    try:
        return load_model(path)
    except OSError as exc:
        raise ModelError(f"cannot read model {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    try:
        bank = load_profile_bank(args.profiles)
    except OSError as exc:
        raise DataError(f"cannot read profile bank: {exc.strerror or exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vrus = [cfg.vru] if cfg.vru else [v for v in VRU_TYPES if any(p.vru == v for p in bank)]
    count = 0
    for vru in vrus:
        for trace in generate_subjects(bank, vru, args.subjects, args.duration, cfg.seed, cfg.pipeline.rate):
            write_trace(trace, out / trace_filename(trace))
            count += 1
    print(f"wrote {count} traces to {out}")
    return EXIT_OK


def _fit(args, cfg: RunConfig, kind: str):
    traces, names = load_traces(args.data, cfg.vru, cfg.pipeline.rate)
    vru = _single_vru(traces, cfg.vru)
    data = [label_frames(t, cfg.pipeline, n) for t, n in zip(traces, names)]
    ts = training_set(data)
    if kind == "moving":
        X, labels, groups, vocab = ts.features, ts.moving_labels, ts.subjects, MOVING_VOCABULARY
    else:
        m = ts.moving
        if not m.any():
            raise DataError("no moving frames to train the location model on")
        X, labels, groups, vocab = ts.features[m], ts.locations[m], ts.subjects[m], location_vocabulary(vru)
    params = replace(cfg.forest, seed=cfg.seed)
    if args.grid_search:
        folds = subject_folds(groups.tolist(), min(args.folds, len(set(groups.tolist()))), cfg.seed)
        result = grid_search(ForestEvaluator(X, labels, groups, vocab, kind), cfg.grid, folds, params)
        params = result.best
        print(f"selected {params.key()} with inner F1 {result.best_score[0]:.3f}", file=sys.stderr)
    model = train_forest(X, labels, params, vocab, kind, vru)
    save_model(model, args.out)
    print(f"wrote {kind} model ({len(model.trees)} trees, {X.shape[0]} frames) to {args.out}")
    return EXIT_OK


def cmd_train_moving(args, cfg):
    return _fit(args, cfg, "moving")


def cmd_train_location(args, cfg):
    return _fit(args, cfg, "location")


def cmd_run(args, cfg: RunConfig) -> int:
    moving = _load_model(args.moving)
    location = _load_model(args.location)
    raw = _read(Path(args.trace))
    vru = raw.annotations["vru"][0] if "vru" in raw.annotations else cfg.vru
    check_models(moving, location, cfg.pipeline, vru)
    report = run_pipeline(resample(raw, cfg.pipeline.rate), moving, location, cfg.pipeline)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", "utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    moving = _load_model(args.moving)
    location = _load_model(args.location)
    check_models(moving, location, cfg.pipeline, cfg.vru)
    traces, _ = load_traces(args.data, location.vru or cfg.vru, cfg.pipeline.rate)
    report = evaluate_models(traces, moving, location, cfg.pipeline)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n", "utf-8")
    if report.segments.total:
        print(render_table(metrics(report.segments), f"{report.vru} segment-based wearing location classification"))
        print()
        print(render_confusion(report.segments))
    else:
        print("no moving segments detected")
    return EXIT_OK


def cmd_nested_cv(args, cfg: RunConfig) -> int:
    traces, names = load_traces(args.data, cfg.vru, cfg.pipeline.rate)
    vru = _single_vru(traces, cfg.vru)
    settings = NestedCVSettings(vru=vru, grid=cfg.grid, base_params=cfg.forest, config=cfg.pipeline,
                                seed=cfg.seed, outer_k=args.outer_folds, inner_k=args.inner_folds,
                                refine=not args.no_refine, baseline=not args.no_baseline)
    report = nested_cv(traces, settings, jobs=args.jobs, names=names)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", "utf-8")
    print(report.render())
    print()
    for fold in report.folds:
        print(f"fold {fold.index}: test {','.join(fold.test_subjects)}  moving {fold.moving_params.key()}  "
              f"location {fold.location_params.key()}  segments {fold.segments.total}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, pipeline: bool = True) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--vru", choices=VRU_TYPES)
    if pipeline:
        g = p.add_argument_group("pipeline constants")
        for name, typ in _PIPELINE_FLAGS.items():
            g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def _forest_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("forest")
    for name, typ in _FOREST_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    g.add_argument("--unlimited-depth", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wearloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate labelled synthetic traces")
    _common(p)
    p.add_argument("--profiles", help="profile bank JSON (default: shipped bank)")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--duration", type=float, default=40.0, help="seconds per trace")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func in (("train-moving", cmd_train_moving), ("train-location", cmd_train_location)):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]} model")
        _common(p)
        _forest_flags(p)
        p.add_argument("--data", required=True, help="directory of trace CSVs")
        p.add_argument("--out", required=True, help="model JSON path")
        p.add_argument("--grid-search", action="store_true", help="choose parameters by subject-wise CV")
        p.add_argument("--folds", type=int, default=5)
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="detect wearing location in one trace")
    _common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--location", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score trained models against annotated traces")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--location", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("nested-cv", help="subject-wise nested cross-validation")
    _common(p)
    _forest_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--outer-folds", type=int, default=5)
    p.add_argument("--inner-folds", type=int, default=5)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--no-refine", action="store_true", help="skip the fine grid stage")
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(func=cmd_nested_cv)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        if min(getattr(args, "outer_folds", 2), getattr(args, "inner_folds", 2)) < 2:
            raise UsageError("--outer-folds and --inner-folds must be at least 2")
        if getattr(args, "subjects", 1) < 1:
            raise UsageError("--subjects must be at least 1")
        cfg = load_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"wearloc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"wearloc: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, TraceFormatError, ProfileError, EvaluationError, GravityError) as exc:
        print(f"wearloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from bad trace/pipeline combinations (e.g. too short for a window)
        print(f"wearloc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

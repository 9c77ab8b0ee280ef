"""Canonical trace CSV format, validation and uniform resampling.

A trace file is UTF-8 CSV with a header line::

    t,ax,ay,az,gx,gy,gz[,activity,location,subject,vru]

``t`` is in seconds, accelerometer columns in m/s^2 and gyroscope columns in
rad/s. Annotation columns are optional, but a column that is present must be
filled on every row.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

SIGNAL_COLUMNS = ("t", "ax", "ay", "az", "gx", "gy", "gz")
ANNOTATION_COLUMNS = ("activity", "location", "subject", "vru")

ACTIVITIES = ("standing", "moving")
VRU_TYPES = ("pedestrian", "cyclist")

LOCATIONS: Dict[str, tuple] = {
    "pedestrian": ("trouser_front", "trouser_back", "jacket", "backpack"),
    "cyclist": ("trouser_front", "jacket", "backpack", "bicycle_rack"),
}

DEFAULT_RATE = 100.0


class TraceFormatError(ValueError):
    """Raised for malformed or invariant-violating trace data."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"{message} at row {row}"
        super().__init__(message)


Annotations = Dict[str, np.ndarray]


def _check_annotations(annotations: Mapping[str, np.ndarray], n: int) -> Annotations:
    out = {}
    for name in ANNOTATION_COLUMNS:
        if name not in annotations:
            continue
        values = np.asarray(annotations[name], dtype=str)
        if values.shape != (n,):
            raise TraceFormatError(f"inconsistent annotations: column {name!r} has {values.size} values for {n} samples")
        out[name] = values
    unknown = set(annotations) - set(ANNOTATION_COLUMNS)
    if unknown:
        raise TraceFormatError(f"unknown annotation columns {sorted(unknown)}")
    return out


@dataclass(frozen=True, eq=False)
class RawTrace:
    """Timestamped 6-axis IMU samples at an arbitrary (possibly irregular) rate."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    annotations: Annotations = field(default_factory=dict)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=float)
        accel = np.ascontiguousarray(self.accel, dtype=float).reshape(-1, 3)
        gyro = np.ascontiguousarray(self.gyro, dtype=float).reshape(-1, 3)
        if t.ndim != 1 or accel.shape[0] != t.size or gyro.shape[0] != t.size:
            raise TraceFormatError("sample arrays disagree in length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(accel)) and np.all(np.isfinite(gyro))):
            raise TraceFormatError("non-finite sample values")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            bad = int(np.argmax(np.diff(t) <= 0)) + 1
            raise TraceFormatError("non-monotonic timestamp", row=bad + 2)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "annotations", _check_annotations(self.annotations, t.size))

    def __len__(self) -> int:
        return self.t.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawTrace):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.accel, other.accel)
            and np.array_equal(self.gyro, other.gyro)
            and self.annotations.keys() == other.annotations.keys()
            and all(np.array_equal(v, other.annotations[k]) for k, v in self.annotations.items())
        )


@dataclass(frozen=True, eq=False)
class UniformTrace:
    """Samples on the fixed grid ``start_t + i / rate``."""

    start_t: float
    rate: float
    accel: np.ndarray
    gyro: np.ndarray
    annotations: Annotations = field(default_factory=dict)

    def __post_init__(self):
        accel = np.ascontiguousarray(self.accel, dtype=float).reshape(-1, 3)
        gyro = np.ascontiguousarray(self.gyro, dtype=float).reshape(-1, 3)
        if accel.shape[0] < 1 or gyro.shape != accel.shape:
            raise TraceFormatError("uniform trace needs at least one sample per sensor")
        if not self.rate > 0:
            raise TraceFormatError("rate must be positive")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)
        object.__setattr__(self, "annotations", _check_annotations(self.annotations, accel.shape[0]))

    def __len__(self) -> int:
        return self.accel.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.start_t + np.arange(len(self)) / self.rate

    def annotation(self, name: str) -> Optional[str]:
        """Return the single value of a constant annotation column, else None."""
        values = self.annotations.get(name)
        if values is None or values.size == 0:
            return None
        first = values[0]
        return str(first) if np.all(values == first) else None

    def to_raw(self) -> RawTrace:
        return RawTrace(self.times, self.accel, self.gyro, dict(self.annotations))


def _validate_labels(annotations: Annotations, rows: np.ndarray) -> None:
    def first_bad(values, allowed):
        bad = ~np.isin(values, allowed)
        return int(np.argmax(bad)) if bad.any() else None

    if "activity" in annotations:
        i = first_bad(annotations["activity"], ACTIVITIES)
        if i is not None:
            raise TraceFormatError(f"unknown activity {annotations['activity'][i]!r}", row=int(rows[i]))
    if "vru" in annotations:
        i = first_bad(annotations["vru"], VRU_TYPES)
        if i is not None:
            raise TraceFormatError(f"unknown vru {annotations['vru'][i]!r}", row=int(rows[i]))
    if "location" in annotations:
        locs = annotations["location"]
        if "vru" in annotations:
            for vru, allowed in LOCATIONS.items():
                mask = annotations["vru"] == vru
                i = first_bad(locs[mask], allowed)
                if i is not None:
                    raise TraceFormatError(
                        f"location {locs[mask][i]!r} not valid for {vru}", row=int(rows[mask][i])
                    )
        else:
            allowed = sorted(set(LOCATIONS["pedestrian"]) | set(LOCATIONS["cyclist"]))
            i = first_bad(locs, allowed)
            if i is not None:
                raise TraceFormatError(f"unknown location {locs[i]!r}", row=int(rows[i]))


def parse_trace(data: Union[bytes, str]) -> RawTrace:
    """Parse canonical trace CSV into a validated :class:`RawTrace`.

    Errors carry the 1-based line number (the header is row 1).
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"trace is not UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(data))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TraceFormatError("empty trace file") from None
    if tuple(header[:7]) != SIGNAL_COLUMNS:
        raise TraceFormatError(f"bad header {','.join(header)!r}", row=1)
    ann_cols = header[7:]
    expected_order = [c for c in ANNOTATION_COLUMNS if c in ann_cols]
    if ann_cols != expected_order or len(set(ann_cols)) != len(ann_cols):
        raise TraceFormatError(f"bad annotation columns {ann_cols}", row=1)

    width = len(header)
    signals = []
    ann_values: Dict[str, list] = {c: [] for c in ann_cols}
    rows = []
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) < 7:
            raise TraceFormatError("malformed row", row=row_no)
        if len(row) != width or any(not v.strip() for v in row[7:]):
            raise TraceFormatError("inconsistent annotations", row=row_no)
        try:
            values = [float(v) for v in row[:7]]
        except ValueError:
            raise TraceFormatError("malformed row", row=row_no) from None
        if not all(math.isfinite(v) for v in values):
            raise TraceFormatError("non-finite value", row=row_no)
        if signals and values[0] <= signals[-1][0]:
            raise TraceFormatError("non-monotonic timestamp", row=row_no)
        signals.append(values)
        for c, v in zip(ann_cols, row[7:]):
            ann_values[c].append(v.strip())
        rows.append(row_no)

    arr = np.array(signals, dtype=float).reshape(-1, 7)
    annotations = {c: np.array(v, dtype=str) for c, v in ann_values.items()}
    _validate_labels(annotations, np.array(rows, dtype=int))
    return RawTrace(arr[:, 0], arr[:, 1:4], arr[:, 4:7], annotations)


def read_trace(path: Union[str, Path]) -> RawTrace:
    return parse_trace(Path(path).read_bytes())


def format_trace(trace: RawTrace) -> str:
    """Render a trace in canonical form (shortest round-trip float repr)."""
    cols = [c for c in ANNOTATION_COLUMNS if c in trace.annotations]
    lines = [",".join(SIGNAL_COLUMNS + tuple(cols))]
    signal = np.column_stack([trace.t, trace.accel, trace.gyro]).tolist()
    ann = [trace.annotations[c].tolist() for c in cols]
    for i, values in enumerate(signal):
        fields = [repr(v) for v in values]
        fields.extend(a[i] for a in ann)
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def write_trace(trace: RawTrace, path: Union[str, Path]) -> None:
    Path(path).write_bytes(format_trace(trace).encode("utf-8"))


def resample(trace: RawTrace, rate: float = DEFAULT_RATE) -> UniformTrace:
    """Linearly interpolate every axis onto a uniform grid over [t_first, t_last].

    Categorical annotations take the value of the nearest original sample
    (the earlier one on exact ties).
    """
    if len(trace) < 2:
        raise TraceFormatError("resampling needs at least 2 samples")
    if not rate > 0:
        raise ValueError("rate must be positive")
    t = trace.t
    # guard floor() against (t_last - t_first) * rate landing a hair below an integer
    n = int(math.floor((t[-1] - t[0]) * rate + 1e-9)) + 1
    grid = t[0] + np.arange(n) / rate
    accel = np.column_stack([np.interp(grid, t, trace.accel[:, j]) for j in range(3)])
    gyro = np.column_stack([np.interp(grid, t, trace.gyro[:, j]) for j in range(3)])

    annotations = {}
    if trace.annotations:
        right = np.clip(np.searchsorted(t, grid), 1, t.size - 1)
        left = right - 1
        nearest = np.where(grid - t[left] <= t[right] - grid, left, right)
        annotations = {k: v[nearest] for k, v in trace.annotations.items()}
    return UniformTrace(float(t[0]), float(rate), accel, gyro, annotations)

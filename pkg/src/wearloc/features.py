"""Sliding-window spectral features.

Every channel keeps a sliding DFT of its last ``N`` samples. Each new sample
updates bins ``0..K`` in O(K) with the recurrence

    X_k <- (X_k - x_out + x_in) * exp(i 2 pi k / N)

where ``x_out`` is the sample leaving the window (zero until the window is
full). Bins are periodically recomputed directly from the ring buffer so
rounding drift cannot accumulate on long streams.

Per channel and frame the 33 features are::

    [mean, dc_bias, mag_1 .. mag_K, approx_error]

with ``mag_k = |X_k| / E`` and ``E`` the L2 norm of the mean-removed window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, TextIO

import numpy as np
from numba import njit

from .preprocess import CHANNELS

WINDOW_LEN = 256
HOP = 50
N_BINS = 30
RESYNC_EVERY = 4096

# windows whose mean-removed energy is below this are treated as silent
SILENT_ENERGY = 1e-9


def bin_frequency(k: int, rate: float = 100.0, window_len: int = WINDOW_LEN) -> float:
    return k * rate / window_len


def features_per_channel(n_bins: int = N_BINS) -> int:
    return n_bins + 3


def feature_names(n_bins: int = N_BINS) -> List[str]:
    names = []
    for ch in CHANNELS:
        names += [f"{ch}_mean", f"{ch}_dc_bias"]
        names += [f"{ch}_mag_{k:02d}" for k in range(1, n_bins + 1)]
        names.append(f"{ch}_approx_error")
    return names


def feature_index(channel: str, name: str, n_bins: int = N_BINS) -> int:
    """Column of a named feature, e.g. ``feature_index("gyro_h", "mag_03")``."""
    return feature_names(n_bins).index(f"{channel}_{name}")


@njit(cache=True)
def _direct_bins(buf, pos, n_bins, out):
    n_ch, n = buf.shape
    for c in range(n_ch):
        for k in range(n_bins + 1):
            acc = 0j
            for m in range(n):
                ang = -2.0 * np.pi * k * m / n
                acc += buf[c, (pos + m) % n] * (np.cos(ang) + 1j * np.sin(ang))
            out[c, k] = acc


@njit(cache=True)
def _slide_block(bins, buf, state, xs, twiddle, resync_every, emit_every, emit_bins, emit_windows):
    # state = [pos, seen, slides_since_resync]; emission happens when the
    # window is full and (seen - N) % emit_every == 0
    n_ch, n = buf.shape
    pos, seen, since = state[0], state[1], state[2]
    n_out = 0
    for i in range(xs.shape[0]):
        for c in range(n_ch):
            x_out = buf[c, pos]
            x_in = xs[i, c]
            buf[c, pos] = x_in
            delta = x_in - x_out
            for k in range(bins.shape[1]):
                bins[c, k] = (bins[c, k] + delta) * twiddle[k]
        pos = (pos + 1) % n
        seen += 1
        since += 1
        if since >= resync_every:
            _direct_bins(buf, pos, bins.shape[1] - 1, bins)
            since = 0
        if emit_every > 0 and seen >= n and (seen - n) % emit_every == 0:
            emit_bins[n_out] = bins
            for c in range(n_ch):
                for m in range(n):
                    emit_windows[n_out, c, m] = buf[c, (pos + m) % n]
            n_out += 1
    state[0], state[1], state[2] = pos, seen, since
    return n_out


class SlidingDft:
    """Sliding DFT bins ``0..n_bins`` for one or more parallel channels."""

    def __init__(self, window_len: int = WINDOW_LEN, n_bins: int = N_BINS, n_channels: int = 1,
                 resync_every: int = RESYNC_EVERY):
        if not 0 < n_bins < window_len / 2:
            raise ValueError("need 0 < n_bins < window_len / 2")
        self.window_len = window_len
        self.n_bins = n_bins
        self.n_channels = n_channels
        self.resync_every = resync_every
        self.bins = np.zeros((n_channels, n_bins + 1), dtype=complex)
        self.buffer = np.zeros((n_channels, window_len))
        self._state = np.zeros(3, dtype=np.int64)
        self._twiddle = np.exp(2j * np.pi * np.arange(n_bins + 1) / window_len)

    @property
    def samples_seen(self) -> int:
        return int(self._state[1])

    def window(self) -> np.ndarray:
        """Current window, oldest sample first, zero-padded before the buffer fills."""
        return np.roll(self.buffer, -int(self._state[0]), axis=1)

    def update(self, x) -> np.ndarray:
        """Push one sample (one value per channel) and return the updated bins."""
        self.feed(np.asarray(x, dtype=float).reshape(1, self.n_channels))
        return self.bins

    def feed(self, xs: np.ndarray, emit_every: int = 0):
        """Push a block of samples, shape ``(m, n_channels)``.

        With ``emit_every > 0``, returns ``(bins, windows)`` snapshots taken at
        every full-window position where ``(seen - N) % emit_every == 0``.
        """
        xs = np.ascontiguousarray(xs, dtype=float).reshape(-1, self.n_channels)
        cap = xs.shape[0] // emit_every + 1 if emit_every > 0 else 0
        emit_bins = np.empty((cap, self.n_channels, self.n_bins + 1), dtype=complex)
        emit_windows = np.empty((cap, self.n_channels, self.window_len))
        n_out = _slide_block(self.bins, self.buffer, self._state, xs, self._twiddle,
                             self.resync_every, emit_every, emit_bins, emit_windows)
        if emit_every > 0:
            return emit_bins[:n_out], emit_windows[:n_out]
        return None


def window_features(window: np.ndarray, dft_bins: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """The ``n_bins + 3`` features of one channel window.

    ``window`` holds the samples oldest first and ``dft_bins`` the DFT
    coefficients ``X_0..X_n_bins`` of that same window. Leading dimensions
    are broadcast, so stacked channels/frames can be processed at once.
    """
    window = np.asarray(window, dtype=float)
    dft_bins = np.asarray(dft_bins)
    n = window.shape[-1]
    mean = window.mean(axis=-1)
    centered = window - mean[..., None]
    energy = np.sqrt(np.sum(centered * centered, axis=-1))
    silent = energy < SILENT_ENERGY
    safe = np.where(silent, 1.0, energy)

    coeffs = dft_bins[..., 1 : n_bins + 1]
    mags = np.abs(coeffs) / safe[..., None]
    basis = np.exp(2j * np.pi * np.outer(np.arange(1, n_bins + 1), np.arange(n)) / n)
    recon = (2.0 / n) * np.real(coeffs @ basis)
    residual = np.sqrt(np.sum((centered - recon) ** 2, axis=-1))
    approx = np.clip(residual / safe, 0.0, 1.0)

    mags = np.where(silent[..., None], 0.0, mags)
    approx = np.where(silent, 0.0, approx)
    return np.concatenate([mean[..., None], mean[..., None], mags, approx[..., None]], axis=-1)


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    t_center: float
    stop: int  # window covers samples [stop - window_len, stop)
    features: np.ndarray


class FrameExtractor:
    """Streaming transformer from local-frame samples to feature frames.

    Feed ``(m, 4)`` blocks of ``[accel_h, accel_v, gyro_h, gyro_v]`` samples;
    a frame is emitted every ``hop`` samples once a full window has been seen.
    """

    def __init__(self, rate: float = 100.0, start_t: float = 0.0, window_len: int = WINDOW_LEN,
                 hop: int = HOP, n_bins: int = N_BINS):
        self.rate = rate
        self.start_t = start_t
        self.window_len = window_len
        self.hop = hop
        self.n_bins = n_bins
        self.dft = SlidingDft(window_len, n_bins, n_channels=len(CHANNELS))
        self._next_index = 0

    def feed(self, samples: np.ndarray) -> List[Frame]:
        samples = np.asarray(samples, dtype=float).reshape(-1, len(CHANNELS))
        seen_before = self.dft.samples_seen
        bins, windows = self.dft.feed(samples, emit_every=self.hop)
        if len(bins) == 0:
            return []
        feats = window_features(windows, bins, self.n_bins).reshape(len(bins), -1)
        # stop positions follow from the emission rule
        first_stop = self.window_len + self.hop * max(0, -(-(seen_before + 1 - self.window_len) // self.hop))
        frames = []
        for j in range(len(bins)):
            stop = first_stop + j * self.hop
            t_center = self.start_t + (stop - 1 - (self.window_len - 1) / 2.0) / self.rate
            frames.append(Frame(self._next_index, t_center, stop, feats[j]))
            self._next_index += 1
        return frames


def extract_frames(channels: np.ndarray, rate: float = 100.0, start_t: float = 0.0,
                   window_len: int = WINDOW_LEN, hop: int = HOP, n_bins: int = N_BINS) -> List[Frame]:
    """Frames for a whole stream; nothing is emitted for streams shorter than a window."""
    extractor = FrameExtractor(rate, start_t, window_len, hop, n_bins)
    return extractor.feed(channels)


def stack_features(frames: Sequence[Frame], dim: Optional[int] = None) -> np.ndarray:
    if not frames:
        return np.empty((0, dim if dim is not None else len(CHANNELS) * features_per_channel()))
    return np.stack([f.features for f in frames])


def write_feature_csv(frames: Sequence[Frame], fh: TextIO, n_bins: int = N_BINS) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["index", "t_center"] + feature_names(n_bins))
    for f in frames:
        writer.writerow([f.index, repr(float(f.t_center))] + [repr(float(v)) for v in f.features])


def iter_feature_csv(fh: TextIO) -> Iterator[Frame]:
    reader = csv.reader(fh)
    next(reader)
    for row in reader:
        yield Frame(int(row[0]), float(row[1]), -1, np.array([float(v) for v in row[2:]]))

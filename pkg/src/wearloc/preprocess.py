"""Gravity estimation and the rotation-invariant local-frame transform.

Each 3-axis sensor is reduced to two channels: the signed projection onto the
gravity direction (``v``) and the magnitude of what remains in the horizontal
plane (``h``). Both are invariant to any rotation of the device about the
gravity axis. The output channel order is fixed as
``[accel_h, accel_v, gyro_h, gyro_v]``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .traces import UniformTrace

DEFAULT_TIME_CONSTANT = 2.0
CHANNELS = ("accel_h", "accel_v", "gyro_h", "gyro_v")

# norms at or below this are treated as "no gravity yet"
_MIN_GRAVITY_NORM = 1e-12


class GravityError(ValueError):
    """Raised when the gravity estimate is zero and no direction exists."""


class TransformedSample(NamedTuple):
    accel_h: float
    accel_v: float
    gyro_h: float
    gyro_v: float


def ema_gain(rate: float, time_constant: float) -> float:
    if not time_constant > 0 or not rate > 0:
        raise ValueError("rate and time_constant must be positive")
    return 1.0 - math.exp(-1.0 / (rate * time_constant))


class GravityFilter:
    """Streaming first-order low-pass of the accelerometer.

    The state is seeded with the first sample, so the estimate never starts
    from zero.
    """

    def __init__(self, rate: float = 100.0, time_constant: float = DEFAULT_TIME_CONSTANT):
        self.rate = rate
        self.time_constant = time_constant
        self.alpha = ema_gain(rate, time_constant)
        self.g_vec = None

    def update(self, accel) -> np.ndarray:
        a = np.asarray(accel, dtype=float)
        if self.g_vec is None:
            self.g_vec = a.copy()
        else:
            self.g_vec = self.g_vec + self.alpha * (a - self.g_vec)
        return self.g_vec


def estimate_gravity(accel: np.ndarray, rate: float = 100.0, time_constant: float = DEFAULT_TIME_CONSTANT) -> np.ndarray:
    """Batch form of :class:`GravityFilter`: one estimate per input sample, shape (n, 3)."""
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    if accel.shape[0] == 0:
        return accel.copy()
    alpha = ema_gain(rate, time_constant)
    b, a = [alpha], [1.0, alpha - 1.0]
    zi = (1.0 - alpha) * accel[0][None, :]
    out, _ = lfilter(b, a, accel, axis=0, zi=zi)
    return out


def _split(signal: np.ndarray, g_hat: np.ndarray):
    v = np.einsum("...i,...i->...", signal, g_hat)
    h = np.linalg.norm(signal - v[..., None] * g_hat, axis=-1)
    return h, v


def to_local_frame(accel, gyro, g) -> np.ndarray:
    """Project accel and gyro onto the gravity direction ``g``.

    Works on single 3-vectors or stacked ``(n, 3)`` arrays; returns ``(..., 4)``
    in channel order ``[accel_h, accel_v, gyro_h, gyro_v]``. ``v`` is positive
    along ``g``.
    """
    accel = np.asarray(accel, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g, axis=-1)
    if np.any(norm <= _MIN_GRAVITY_NORM):
        raise GravityError("gravity not established")
    g_hat = g / norm[..., None]
    ah, av = _split(accel, g_hat)
    gh, gv = _split(gyro, g_hat)
    return np.stack([ah, av, gh, gv], axis=-1)


def transform_sample(accel, gyro, g) -> TransformedSample:
    return TransformedSample(*(float(x) for x in to_local_frame(accel, gyro, g)))


def transform_trace(trace: UniformTrace, time_constant: float = DEFAULT_TIME_CONSTANT) -> np.ndarray:
    """Gravity-filter a uniform trace and return its ``(n, 4)`` local-frame channels."""
    g = estimate_gravity(trace.accel, trace.rate, time_constant)
    return to_local_frame(trace.accel, trace.gyro, g)

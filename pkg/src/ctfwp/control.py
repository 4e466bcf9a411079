"""Differentiable control paths from discrete, possibly gappy observations.

Observations are forward/back-filled per channel, a time channel carrying the
raw timestamps is prepended, and knots are placed at 0, 1, ..., N-1 so that
fixed-step solvers anchor on unit knot spacing. Paths are piecewise cubic
(natural boundary) or piecewise linear, evaluated exactly from per-segment
polynomial coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class OrderingError(ValueError):
    """Knot times not strictly increasing."""


class UnusableChannelError(ValueError):
    """A channel has no observed value at all."""


@dataclass
class ControlPath:
    kind: str  # "natural_cubic" | "linear"
    knot_times: Array  # (n,)
    knot_values: Array  # (n, channels)
    coeffs: Array  # (n-1, 4, channels): value = a + b*dt + c*dt^2 + d*dt^3
    channels: int

    @property
    def t0(self) -> float:
        return float(self.knot_times[0])

    @property
    def t1(self) -> float:
        return float(self.knot_times[-1])


def preprocess_missing(times: Array, values: Array, mask: Array, add_masks: bool = False) -> Array:
    """Dense knot matrix: time channel 0, then filled channels, then optional masks.

    Per channel, gaps are forward-filled from the last observation and a
    leading gap is back-filled from the first one.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n, c = values.shape
    filled = np.empty_like(values)
    for ch in range(c):
        obs = np.flatnonzero(mask[:, ch])
        if obs.size == 0:
            raise UnusableChannelError(f"channel {ch} has no observed values")
        col = values[:, ch].copy()
        col[~mask[:, ch]] = np.nan
        # leading back-fill, then forward fill
        col[: obs[0]] = col[obs[0]]
        for i in range(1, n):
            if np.isnan(col[i]):
                col[i] = col[i - 1]
        filled[:, ch] = col
    cols = [times[:, None], filled]
    if add_masks:
        cols.append(mask.astype(np.float64))
    return np.concatenate(cols, axis=1)


def fit_path(times: Array, values: Array, kind: str = "natural_cubic") -> ControlPath:
    """Interpolate (times, values) knots; values is (n, channels)."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = times.shape[0]
    if n < 2:
        raise OrderingError(f"need at least 2 knots, got {n}")
    if np.any(np.diff(times) <= 0):
        raise OrderingError("knot times must be strictly increasing")
    if kind == "linear":
        coeffs = _linear_coeffs(times, values)
    elif kind == "natural_cubic":
        coeffs = _natural_cubic_coeffs(times, values)
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    return ControlPath(kind=kind, knot_times=times, knot_values=values, coeffs=coeffs, channels=values.shape[1])


def _linear_coeffs(t: Array, y: Array) -> Array:
    h = np.diff(t)[:, None]
    coeffs = np.zeros((len(t) - 1, 4, y.shape[1]))
    coeffs[:, 0, :] = y[:-1]
    coeffs[:, 1, :] = (y[1:] - y[:-1]) / h
    return coeffs


def _natural_cubic_coeffs(t: Array, y: Array) -> Array:
    """Solve the tridiagonal system for second derivatives with natural boundary."""
    n, c = y.shape
    h = np.diff(t)
    m = np.zeros((n, c))  # second derivatives; m[0] = m[-1] = 0
    if n > 2:
        # Thomas algorithm on the interior equations
        sub = h[:-1].copy()
        diag = 2.0 * (h[:-1] + h[1:])
        sup = h[1:].copy()
        rhs = 6.0 * ((y[2:] - y[1:-1]) / h[1:, None] - (y[1:-1] - y[:-2]) / h[:-1, None])
        k = n - 2
        cp = np.zeros(k)
        dp = np.zeros((k, c))
        cp[0] = sup[0] / diag[0]
        dp[0] = rhs[0] / diag[0]
        for i in range(1, k):
            denom = diag[i] - sub[i] * cp[i - 1]
            cp[i] = sup[i] / denom
            dp[i] = (rhs[i] - sub[i] * dp[i - 1]) / denom
        m[k] = dp[k - 1]
        for i in range(k - 2, -1, -1):
            m[i + 1] = dp[i] - cp[i] * m[i + 2]
    coeffs = np.zeros((n - 1, 4, c))
    hh = h[:, None]
    coeffs[:, 0, :] = y[:-1]
    coeffs[:, 1, :] = (y[1:] - y[:-1]) / hh - hh * (2.0 * m[:-1] + m[1:]) / 6.0
    coeffs[:, 2, :] = m[:-1] / 2.0
    coeffs[:, 3, :] = (m[1:] - m[:-1]) / (6.0 * hh)
    return coeffs


def _segment_index(path: ControlPath, t: float) -> tuple[int, float, bool]:
    times = path.knot_times
    clamped = False
    if t < times[0]:
        t, clamped = times[0], True
    elif t > times[-1]:
        t, clamped = times[-1], True
    idx = int(np.searchsorted(times, t, side="right")) - 1
    idx = min(max(idx, 0), len(times) - 2)
    return idx, t - times[idx], clamped


def eval_control(path: ControlPath, t: float, with_flag: bool = False):
    """Exact polynomial value of the segment containing t (clamped to the span)."""
    if path.coeffs.shape[0] == 0:
        raise ValueError("empty control path")
    idx, dt, clamped = _segment_index(path, t)
    a, b, c, d = path.coeffs[idx]
    val = a + dt * (b + dt * (c + dt * d))
    return (val, clamped) if with_flag else val


def eval_control_derivative(path: ControlPath, t: float, with_flag: bool = False):
    """Analytic segment derivative (no finite differencing)."""
    if path.coeffs.shape[0] == 0:
        raise ValueError("empty control path")
    idx, dt, clamped = _segment_index(path, t)
    _, b, c, d = path.coeffs[idx]
    val = b + dt * (2.0 * c + dt * 3.0 * d)
    return (val, clamped) if with_flag else val


def knots_from_record(times: Array, values: Array, mask: Array, add_masks: bool = False):
    """Rescaled knot grid 0..N-1 plus the dense knot matrix (time channel kept raw)."""
    dense = preprocess_missing(times, values, mask, add_masks=add_masks)
    grid = np.arange(dense.shape[0], dtype=np.float64)
    return grid, dense

"""Depth-1 and depth-2 log-signatures over sub-sampled path windows.

Depth 1 keeps per-window increments; depth 2 appends Levy areas
A_ij = 1/2 * integral(x_i dx_j - x_j dx_i) over the window, taken relative to
the window's first point so the features are invariant under adding a
constant to the path. The depth-2 basis order is the d increments followed by
A_ij for i < j in lexicographic order; consumers treat this as one flat
feature vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class WindowError(ValueError):
    """A window has fewer than two sample points."""


def logsig_dim(channels: int, depth: int) -> int:
    if depth == 1:
        return channels
    if depth == 2:
        return channels + channels * (channels - 1) // 2
    raise ValueError(f"unsupported log-signature depth {depth}")


@dataclass
class LogSignatureStream:
    window_times: Array  # right boundary of each window, in knot units
    features: Array  # (n_windows, logsig_dim)
    depth: int
    step: int


def logsig_window(points: Array, depth: int) -> Array:
    """Log-signature of one window given its ordered sample matrix (m, d)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] < 2:
        raise WindowError(f"window needs >= 2 points, got {points.shape[0]}")
    inc = points[-1] - points[0]
    if depth == 1:
        return inc.copy()
    if depth != 2:
        raise ValueError(f"unsupported log-signature depth {depth}")
    rel = points - points[0]
    mid = 0.5 * (rel[:-1] + rel[1:])  # segment midpoints (exact for piecewise linear)
    delta = np.diff(rel, axis=0)
    d = points.shape[1]
    areas = []
    for i in range(d):
        for j in range(i + 1, d):
            a = 0.5 * float(np.sum(mid[:, i] * delta[:, j] - mid[:, j] * delta[:, i]))
            areas.append(a)
    return np.concatenate([inc, np.array(areas)])


def windowize(values: Array, step: int, depth: int) -> LogSignatureStream:
    """Consecutive non-overlapping windows of ``step`` intervals; final partial kept."""
    values = np.asarray(values, dtype=np.float64)
    if step < 1:
        raise ValueError("step must be >= 1")
    n = values.shape[0]
    n_windows = max(1, math.ceil((n - 1) / step))
    feats = []
    times = []
    for w in range(n_windows):
        lo = w * step
        hi = min(lo + step, n - 1)
        feats.append(logsig_window(values[lo : hi + 1], depth))
        times.append(float(hi))
    return LogSignatureStream(
        window_times=np.array(times),
        features=np.stack(feats),
        depth=depth,
        step=step,
    )

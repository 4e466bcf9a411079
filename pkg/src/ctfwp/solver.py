"""Numerical ODE integration: fixed-step Euler/RK4 and adaptive Dormand-Prince 5(4).

Vector fields are plain callables ``f(t, y) -> dy`` on float64 arrays.
Backward integration (t1 < t0) is supported by every method. Fixed-step grids
are anchored at multiples of 1/steps_per_knot so evaluation times never
straddle a control-path segment boundary mid-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class DivergenceError(RuntimeError):
    def __init__(self, message: str, t_reached: float):
        super().__init__(message)
        self.t_reached = t_reached


class InstabilityError(RuntimeError):
    def __init__(self, message: str, t_reached: float):
        super().__init__(message)
        self.t_reached = t_reached


@dataclass
class SolveConfig:
    method: str = "rk4"
    rtol: float = 1e-7
    atol: float = 1e-9
    fixed_steps_per_knot: int = 1
    max_steps: int = 100_000

    def validate(self) -> None:
        if self.method not in ("euler", "rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.fixed_steps_per_knot < 1:
            raise ValueError("fixed_steps_per_knot must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def euler_step(f, t: float, h: Array, dt: float) -> Array:
    return h + dt * f(t, h)


def rk4_step(f, t: float, h: Array, dt: float) -> Array:
    """Classical 4-stage Runge-Kutta step (weights 1/6, 1/3, 1/3, 1/6)."""
    k1 = f(t, h)
    k2 = f(t + dt / 2.0, h + (dt / 2.0) * k1)
    k3 = f(t + dt / 2.0, h + (dt / 2.0) * k2)
    k4 = f(t + dt, h + dt * k3)
    return h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def fixed_grid(t0: float, t1: float, steps_per_knot: int) -> np.ndarray:
    """Step boundaries from t0 to t1 anchored at multiples of 1/steps_per_knot."""
    if t1 == t0:
        return np.array([t0])
    m = steps_per_knot
    lo, hi = (t0, t1) if t1 > t0 else (t1, t0)
    k_first = math.floor(lo * m + 1e-9) + 1
    k_last = math.ceil(hi * m - 1e-9) - 1
    pts = [lo]
    for k in range(k_first, k_last + 1):
        pts.append(k / m)
    pts.append(hi)
    grid = np.array(pts)
    # collapse anchors that coincide with an endpoint
    keep = np.concatenate(([True], np.diff(grid) > 1e-12))
    grid = grid[keep]
    if t1 < t0:
        grid = grid[::-1]
    return grid


def _check_state(y: Array, t: float) -> None:
    if not np.all(np.isfinite(y)):
        raise InstabilityError(f"non-finite state at t = {t:g}", t)


def _solve_fixed(f, y0: Array, t0: float, t1: float, cfg: SolveConfig) -> Array:
    step = euler_step if cfg.method == "euler" else rk4_step
    grid = fixed_grid(t0, t1, cfg.fixed_steps_per_knot)
    y = y0
    for i in range(len(grid) - 1):
        t, tn = grid[i], grid[i + 1]
        y = step(f, t, y, tn - t)
        _check_state(y, tn)
    return y


# Dormand-Prince 5(4) tableau (Hairer, Norsett & Wanner)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4


def _initial_step(f, t0: float, y0: Array, f0: Array, direction: float, cfg: SolveConfig) -> float:
    """Hairer-Norsett-Wanner automatic initial step size."""
    scale = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = f(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1)


def _solve_dopri5(f, y0: Array, t0: float, t1: float, cfg: SolveConfig) -> Array:
    if t1 == t0:
        return y0.copy()
    direction = 1.0 if t1 > t0 else -1.0
    t = t0
    y = y0.copy()
    f_cur = f(t, y)
    h = _initial_step(f, t0, y, f_cur, direction, cfg)
    errold = 1e-4
    nsteps = 0
    while direction * (t1 - t) > 0:
        nsteps += 1
        if nsteps > cfg.max_steps:
            raise DivergenceError(f"dopri5 exceeded max_steps = {cfg.max_steps}, reached t = {t:g}", t)
        h = min(h, abs(t1 - t))
        dt = direction * h
        k = [f_cur]
        for s in range(1, 7):
            ys = y + dt * sum(a * ks for a, ks in zip(_DP_A[s], k))
            k.append(f(t + _DP_C[s] * dt, ys))
        y_new = y + dt * sum(b * ks for b, ks in zip(_DP_B5, k) if b != 0.0)
        err_vec = dt * sum(e * ks for e, ks in zip(_DP_E, k) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if err <= 1.0:
            t = t + dt
            y = y_new
            f_cur = k[6]  # FSAL: last stage sits at t + dt
            _check_state(y, t)
            fac = 10.0 if err == 0.0 else min(10.0, max(0.2, 0.9 * err**-0.17 * errold**0.04))
            errold = max(err, 1e-4)
            h *= fac
        else:
            h *= max(0.2, min(1.0, 0.9 * err**-0.2))
    return y


def ode_solve(f, h0: Array, t0: float, t1: float, cfg: SolveConfig, eval_times=None):
    """Integrate h' = f(t, h) from t0 to t1 (either direction).

    Returns the state at t1, or ``(state_t1, [state at each eval time])`` when
    ``eval_times`` is given. Intermediate times are reached by step truncation;
    they must lie between t0 and t1 and be ordered along the direction of
    integration.
    """
    cfg.validate()
    h0 = np.asarray(h0, dtype=np.float64)
    _check_state(h0, t0)
    solve = _solve_fixed if cfg.method in ("euler", "rk4") else _solve_dopri5
    if eval_times is None:
        return solve(f, h0, t0, t1, cfg)
    direction = 1.0 if t1 >= t0 else -1.0
    prev = t0
    for te in eval_times:
        if direction * (te - prev) < 0 or direction * (t1 - te) < 0:
            raise ValueError(f"eval time {te:g} not ordered inside [{t0:g}, {t1:g}]")
        prev = te
    states = []
    y = h0
    t_cur = t0
    for te in eval_times:
        y = solve(f, y, t_cur, te, cfg)
        states.append(y.copy())
        t_cur = te
    y = solve(f, y, t_cur, t1, cfg)
    return y, states

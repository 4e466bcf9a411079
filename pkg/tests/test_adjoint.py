import tracemalloc

import numpy as np
import pytest
from scipy.linalg import expm

from ctfwp.adjoint import backward_adjoint, grad_check_fd
from ctfwp.numcore import ParamStore
from ctfwp.solver import SolveConfig


class ZeroField:
    def __init__(self, dim):
        self.state_dim = dim
        self.n_theta = 0

    def eval(self, t, h):
        return np.zeros_like(h)

    def vjp(self, t, h, a):
        return np.zeros_like(h), np.zeros_like(h), np.zeros(0)


class ScalarThetaField:
    """h' = theta * h with a single scalar parameter."""

    def __init__(self, theta):
        self.theta = float(theta)
        self.state_dim = 1
        self.n_theta = 1

    def eval(self, t, h):
        return self.theta * h

    def vjp(self, t, h, a):
        return self.theta * h, self.theta * a, np.array([float(a @ h)])


class LinearField:
    """h' = M h, time independent; df/dh = M exactly."""

    def __init__(self, m):
        self.m = m
        self.state_dim = m.shape[0]
        self.n_theta = m.size

    def eval(self, t, h):
        return self.m @ h

    def vjp(self, t, h, a):
        return self.m @ h, self.m.T @ a, np.outer(a, h).ravel()


def test_zero_field_passes_gradient_through():
    fld = ZeroField(3)
    cfg = SolveConfig(method="rk4", fixed_steps_per_knot=4)
    hT = np.array([1.0, 2.0, 3.0])
    g = np.array([0.5, -1.0, 2.0])
    dh0, dtheta = backward_adjoint(fld, hT, g, 0.0, 5.0, cfg)
    assert np.array_equal(dh0, g)
    assert dtheta.size == 0


def test_scalar_theta_field_at_zero():
    # h' = theta h, h0 = 1, L = h(1): dL/dh0 = e^theta, dL/dtheta = e^theta; at theta = 0 both are 1
    fld = ScalarThetaField(0.0)
    cfg = SolveConfig(method="rk4", fixed_steps_per_knot=32)
    hT = np.array([1.0])  # h(1) = h0 when theta = 0
    dh0, dtheta = backward_adjoint(fld, hT, np.array([1.0]), 0.0, 1.0, cfg)
    assert abs(dh0[0] - 1.0) < 1e-8
    assert abs(dtheta[0] - 1.0) < 1e-8


def test_scalar_theta_field_nonzero():
    theta = 0.3
    fld = ScalarThetaField(theta)
    cfg = SolveConfig(method="rk4", fixed_steps_per_knot=64)
    hT = np.array([np.exp(theta)])
    dh0, dtheta = backward_adjoint(fld, hT, np.array([1.0]), 0.0, 1.0, cfg)
    assert abs(dh0[0] - np.exp(theta)) < 1e-7
    assert abs(dtheta[0] - np.exp(theta)) < 1e-6


def test_linear_field_matches_transposed_jacobian_product():
    rng = np.random.default_rng(2)
    m = rng.uniform(-0.4, 0.4, size=(4, 4))
    fld = LinearField(m)
    cfg = SolveConfig(method="rk4", fixed_steps_per_knot=32)
    t1 = 2.0
    h0 = rng.uniform(-1, 1, size=4)
    hT = expm(m * t1) @ h0
    g = rng.uniform(-1, 1, size=4)
    dh0, _ = backward_adjoint(fld, hT, g, 0.0, t1, cfg)
    assert np.max(np.abs(dh0 - expm(m * t1).T @ g)) < 1e-6


def test_adjoint_memory_flat_in_sequence_length():
    rng = np.random.default_rng(3)
    m = rng.uniform(-0.05, 0.05, size=(24, 24))
    fld = LinearField(m)
    cfg = SolveConfig(method="rk4", fixed_steps_per_knot=1)

    def peak(t_span):
        hT = rng.uniform(-1, 1, size=24)
        g = rng.uniform(-1, 1, size=24)
        tracemalloc.start()
        backward_adjoint(fld, hT, g, 0.0, t_span, cfg)
        _, pk = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        return pk

    peak(8.0)  # warm-up allocations
    short = peak(8.0)
    long = peak(512.0)
    # 64x more steps must not grow peak live memory beyond grid bookkeeping
    assert long < short + 200_000, (short, long)


def test_grad_check_fd_quadratic():
    store = ParamStore()
    store.add("p", np.array([0.3, -1.2, 2.0]))

    def loss():
        return 0.5 * float(np.sum(store["p"] ** 2))

    report = grad_check_fd(loss, store, {"p": store["p"].copy()}, perturbation=1e-4)
    assert report.max_rel < 1e-6


def test_grad_check_fd_linear():
    store = ParamStore()
    store.add("p", np.array([0.5, 1.5]))
    c = np.array([2.0, -3.0])

    def loss():
        return float(c @ store["p"])

    report = grad_check_fd(loss, store, {"p": c.copy()}, perturbation=1e-4)
    assert report.max_rel < 1e-9


def test_grad_check_fd_detects_nondeterminism():
    store = ParamStore()
    store.add("p", np.zeros(1))
    state = {"n": 0}

    def loss():
        state["n"] += 1
        return float(state["n"])

    with pytest.raises(RuntimeError):
        grad_check_fd(loss, store, {"p": np.zeros(1)})


def test_grad_check_report_table_format():
    store = ParamStore()
    store.add("weights", np.array([1.0]))

    def loss():
        return float(store["weights"][0] ** 2)

    report = grad_check_fd(loss, store, {"weights": np.array([2.0])})
    table = report.format_table()
    assert "weights" in table and "rel_err" in table

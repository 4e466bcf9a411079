import numpy as np
import pytest

from ctfwp.control import (
    OrderingError,
    UnusableChannelError,
    eval_control,
    eval_control_derivative,
    fit_path,
    knots_from_record,
    preprocess_missing,
)
from ctfwp.solver import SolveConfig, ode_solve


def test_preprocess_fully_observed_prepends_time():
    times = np.array([0.0, 0.5, 2.0])
    values = np.array([[1.0], [2.0], [3.0]])
    mask = np.ones_like(values, dtype=bool)
    dense = preprocess_missing(times, values, mask)
    assert dense.shape == (3, 2)
    assert np.array_equal(dense[:, 0], times)
    assert np.array_equal(dense[:, 1], [1.0, 2.0, 3.0])


def test_preprocess_forward_fill():
    times = np.arange(4.0)
    values = np.array([[1.0], [np.nan], [np.nan], [4.0]])
    mask = ~np.isnan(values)
    dense = preprocess_missing(times, values, mask)
    assert np.array_equal(dense[:, 1], [1.0, 1.0, 1.0, 4.0])


def test_preprocess_leading_backfill():
    times = np.arange(2.0)
    values = np.array([[np.nan], [2.0]])
    dense = preprocess_missing(times, values, ~np.isnan(values))
    assert np.array_equal(dense[:, 1], [2.0, 2.0])


def test_preprocess_mask_channels():
    times = np.arange(2.0)
    values = np.array([[np.nan, 1.0], [2.0, 3.0]])
    dense = preprocess_missing(times, values, ~np.isnan(values), add_masks=True)
    assert dense.shape == (2, 5)
    assert np.array_equal(dense[:, 3:], [[0.0, 1.0], [1.0, 1.0]])


def test_preprocess_dead_channel_named():
    times = np.arange(2.0)
    values = np.full((2, 2), np.nan)
    values[:, 0] = 1.0
    with pytest.raises(UnusableChannelError) as ei:
        preprocess_missing(times, values, ~np.isnan(values))
    assert "channel 1" in str(ei.value)


def test_linear_path_example():
    path = fit_path(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]), kind="linear")
    assert abs(eval_control(path, 0.5)[0] - 0.5) < 1e-15
    assert abs(eval_control_derivative(path, 0.5)[0] - 1.0) < 1e-15


def test_linear_two_channel_eval():
    path = fit_path(np.array([0.0, 2.0]), np.array([[0.0], [4.0]]), kind="linear")
    assert abs(eval_control(path, 1.0)[0] - 2.0) < 1e-15
    assert abs(eval_control_derivative(path, 1.0)[0] - 2.0) < 1e-15


def test_natural_cubic_three_knot_values():
    path = fit_path(np.array([0.0, 1.0, 2.0]), np.array([[0.0], [1.0], [0.0]]), kind="natural_cubic")
    # independently solved: x(t) = 1.5 t - 0.5 t^3 on [0, 1]
    assert abs(eval_control(path, 0.5)[0] - 0.6875) < 1e-12
    assert abs(eval_control(path, 1.0)[0] - 1.0) < 1e-12
    assert abs(eval_control_derivative(path, 0.0)[0] - 1.5) < 1e-12
    # interior second derivative -3 via the quadratic coefficient
    assert abs(2.0 * path.coeffs[0, 2, 0]) < 1e-12
    assert abs(2.0 * path.coeffs[1, 2, 0] + 3.0) < 1e-12


def test_natural_cubic_interpolates_knots():
    rng = np.random.default_rng(4)
    times = np.sort(rng.uniform(0, 10, size=9))
    times += np.arange(9) * 1e-3  # guard strict monotonicity
    values = rng.uniform(-2, 2, size=(9, 3))
    path = fit_path(times, values, kind="natural_cubic")
    for i, t in enumerate(times):
        assert np.max(np.abs(eval_control(path, float(t)) - values[i])) < 1e-12


def test_natural_boundary_second_derivative():
    rng = np.random.default_rng(5)
    times = np.arange(6.0)
    values = rng.uniform(-1, 1, size=(6, 2))
    path = fit_path(times, values, kind="natural_cubic")
    # d2/dt2 = 2c + 6d*dt; at the first knot dt = 0, at the last dt = h
    assert np.max(np.abs(2.0 * path.coeffs[0, 2])) < 1e-9
    h = times[-1] - times[-2]
    end = 2.0 * path.coeffs[-1, 2] + 6.0 * path.coeffs[-1, 3] * h
    assert np.max(np.abs(end)) < 1e-9


def test_smoothness_at_interior_knots():
    rng = np.random.default_rng(6)
    times = np.cumsum(rng.uniform(0.5, 2.0, size=7))
    values = rng.uniform(-1, 1, size=(7, 2))
    path = fit_path(times, values, kind="natural_cubic")
    for t in times[1:-1]:
        eps = 1e-7
        left = eval_control_derivative(path, float(t - eps))
        right = eval_control_derivative(path, float(t + eps))
        assert np.max(np.abs(left - right)) < 1e-5


def test_collinear_knots_reduce_to_line():
    times = np.arange(5.0)
    values = (2.0 * times - 1.0)[:, None]
    path = fit_path(times, values, kind="natural_cubic")
    assert np.max(np.abs(path.coeffs[:, 2:])) < 1e-10
    two = fit_path(times[:2], values[:2], kind="natural_cubic")
    assert np.max(np.abs(two.coeffs[:, 2:])) < 1e-10


def test_integral_of_derivative_matches_increment():
    rng = np.random.default_rng(7)
    for _ in range(5):
        times = np.arange(6.0)
        values = rng.uniform(-2, 2, size=(6, 2))
        path = fit_path(times, values, kind="natural_cubic")
        ta, tb = 0.0, 5.0
        cfg = SolveConfig(method="rk4", fixed_steps_per_knot=64)
        out = ode_solve(lambda t, y: eval_control_derivative(path, t), eval_control(path, ta), ta, tb, cfg)
        assert np.max(np.abs(out - eval_control(path, tb))) < 1e-8


def test_derivative_matches_central_differences():
    rng = np.random.default_rng(8)
    times = np.arange(5.0)
    values = rng.uniform(-1, 1, size=(5, 2))
    path = fit_path(times, values, kind="natural_cubic")
    for t in rng.uniform(0.1, 3.9, size=20):
        h = 1e-6
        num = (eval_control(path, t + h) - eval_control(path, t - h)) / (2 * h)
        assert np.max(np.abs(num - eval_control_derivative(path, t))) < 1e-5


def test_clamping_flag_outside_span():
    path = fit_path(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]), kind="linear")
    val, clamped = eval_control(path, 2.0, with_flag=True)
    assert clamped and abs(val[0] - 1.0) < 1e-15
    _, inside = eval_control(path, 0.5, with_flag=True)
    assert not inside


def test_ordering_errors():
    with pytest.raises(OrderingError):
        fit_path(np.array([0.0, 0.0, 1.0]), np.zeros((3, 1)))
    with pytest.raises(OrderingError):
        fit_path(np.array([0.0]), np.zeros((1, 1)))


def test_knots_from_record_rescales_grid():
    times = np.array([3.0, 9.0, 100.0])
    values = np.ones((3, 1))
    grid, dense = knots_from_record(times, values, np.ones_like(values, dtype=bool))
    assert np.array_equal(grid, [0.0, 1.0, 2.0])
    assert np.array_equal(dense[:, 0], times)

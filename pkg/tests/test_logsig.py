import numpy as np
import pytest

from ctfwp.logsig import LogSignatureStream, WindowError, logsig_dim, logsig_window, windowize

# ---------------------------------------------------------------------------
# brute-force truncated-signature oracle (level 2), used for Chen consistency


def sig_level2(points):
    """S1 and S2 of a piecewise-linear path: S2_ij = int (x_i - x_i(0)) dx_j."""
    rel = points - points[0]
    mid = 0.5 * (rel[:-1] + rel[1:])
    delta = np.diff(rel, axis=0)
    s1 = rel[-1].copy()
    s2 = np.einsum("ki,kj->ij", mid, delta)
    return s1, s2


def chen_product(a, b):
    """Concatenate two level-2 signatures."""
    s1 = a[0] + b[0]
    s2 = a[1] + b[1] + np.outer(a[0], b[0])
    return s1, s2


def logsig_from_sig(s1, s2):
    """log of the truncated signature; level-2 part antisymmetrizes to Levy areas."""
    l2 = s2 - 0.5 * np.outer(s1, s1)
    d = s1.shape[0]
    areas = [l2[i, j] for i in range(d) for j in range(i + 1, d) if True]
    # l2 is antisymmetric up to numerics; A_ij = (s2_ij - s2_ji) / 2 equivalently
    return np.concatenate([s1, np.array(areas)])


def test_dim_formula():
    assert logsig_dim(3, 1) == 3
    assert logsig_dim(3, 2) == 6
    assert logsig_dim(6, 2) == 21


def test_straight_line_window_has_zero_area():
    pts = np.array([[0.0, 0.0], [2.0, 3.0]])
    out = logsig_window(pts, depth=2)
    assert np.allclose(out[:2], [2.0, 3.0])
    assert out[2] == 0.0


def test_l_path_levy_area():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    out = logsig_window(pts, depth=2)
    assert np.array_equal(out[:2], [1.0, 1.0])
    assert out[2] == 0.5


def test_time_reversal_negates():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(5, 2))
    fwd = logsig_window(pts, depth=2)
    bwd = logsig_window(pts[::-1], depth=2)
    assert np.max(np.abs(fwd + bwd)) < 1e-12


def test_constant_shift_invariance():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(6, 3))
    shifted = pts + np.array([10.0, -4.0, 2.5])
    a = logsig_window(pts, depth=2)
    b = logsig_window(shifted, depth=2)
    assert np.max(np.abs(a[3:] - b[3:])) < 1e-12


def test_window_error():
    with pytest.raises(WindowError):
        logsig_window(np.zeros((1, 2)), depth=1)


def test_windowize_first_differences():
    vals = np.array([[0.0], [1.0], [3.0], [6.0]])
    stream = windowize(vals, step=1, depth=1)
    assert np.allclose(stream.features.ravel(), [1.0, 2.0, 3.0])
    assert np.array_equal(stream.window_times, [1.0, 2.0, 3.0])


def test_windowize_ceiling_division():
    vals = np.zeros((17000, 2))
    stream = windowize(vals, step=4, depth=1)
    assert stream.features.shape[0] == 4250


def test_windowize_giant_step_single_window():
    rng = np.random.default_rng(2)
    vals = rng.uniform(-1, 1, size=(9, 2))
    stream = windowize(vals, step=100, depth=2)
    assert stream.features.shape[0] == 1
    assert np.allclose(stream.features[0], logsig_window(vals, depth=2))


def test_depth1_windows_telescope():
    rng = np.random.default_rng(3)
    vals = rng.uniform(-1, 1, size=(23, 3))
    stream = windowize(vals, step=4, depth=1)
    assert np.max(np.abs(stream.features.sum(axis=0) - (vals[-1] - vals[0]))) == 0.0


def test_chen_consistency_against_bruteforce():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n1 = int(rng.integers(2, 5))
        n2 = int(rng.integers(2, 5))
        first = rng.uniform(-1, 1, size=(n1, 2))
        second = rng.uniform(-1, 1, size=(n2, 2))
        second = np.concatenate([first[-1:], second])  # concatenable halves
        whole = np.concatenate([first, second[1:]])
        ours = logsig_window(whole, depth=2)
        oracle = logsig_from_sig(*chen_product(sig_level2(first), sig_level2(second)))
        assert np.max(np.abs(ours - oracle)) < 1e-10


def test_stream_dataclass_shape():
    vals = np.random.default_rng(5).uniform(size=(10, 2))
    stream = windowize(vals, step=3, depth=2)
    assert isinstance(stream, LogSignatureStream)
    assert stream.features.shape == (3, logsig_dim(2, 2))
    assert stream.depth == 2 and stream.step == 3

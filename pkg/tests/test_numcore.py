import numpy as np
import pytest

from ctfwp.numcore import (
    AdamState,
    DegenerateInputError,
    GradAlignmentError,
    ParamStore,
    ShapeMismatchError,
    adam_update,
    apply_activation,
    apply_activation_vjp,
    apply_layer_norm,
    apply_layer_norm_vjp,
    apply_linear,
    apply_linear_vjp,
    load_checkpoint,
    save_checkpoint,
)


def test_linear_identity():
    w = np.eye(2)
    assert np.allclose(apply_linear(w, np.array([3.0, -1.0])), [3.0, -1.0])


def test_linear_hand_case():
    w = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert np.allclose(apply_linear(w, np.array([1.0, 1.0])), [3.0, 1.0])


def test_linear_vjp_outer_product():
    w = np.zeros((2, 2))
    x = np.array([1.0, 1.0])
    dw, dx, _ = apply_linear_vjp(w, x, np.array([1.0, 0.0]))
    assert np.allclose(dw, [[1.0, 1.0], [0.0, 0.0]])
    assert dx.shape == (2,)


def test_linear_shape_error_reports_both_shapes():
    with pytest.raises(ShapeMismatchError) as ei:
        apply_linear(np.zeros((2, 3)), np.zeros(4))
    assert "(2, 3)" in str(ei.value) and "(4,)" in str(ei.value)


def test_layer_norm_examples():
    one = np.ones(2)
    zero = np.zeros(2)
    out = apply_layer_norm(np.array([1.0, -1.0]), one, zero)
    assert np.allclose(out, [1.0, -1.0], atol=1e-4)
    assert np.allclose(apply_layer_norm(np.array([2.0, 2.0]), one, zero), [0.0, 0.0])
    out = apply_layer_norm(np.array([0.0, 2.0]), one, zero)
    assert np.allclose(out, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_rejects_degenerate():
    with pytest.raises(DegenerateInputError):
        apply_layer_norm(np.array([1.0]), np.ones(1), np.zeros(1))


def test_activation_examples():
    assert np.allclose(apply_activation("softmax", np.zeros(2)), [0.5, 0.5])
    assert np.allclose(apply_activation("sigmoid", np.zeros(1)), [0.5])
    out = apply_activation("softmax", np.log(np.array([1.0, 3.0])))
    assert np.allclose(out, [0.25, 0.75])


def test_softmax_properties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-4, 4, size=7)
        s = apply_activation("softmax", x)
        assert abs(s.sum() - 1.0) < 1e-12
        assert np.all(s > 0)
        shifted = apply_activation("softmax", x + 1.234)
        assert np.max(np.abs(s - shifted)) < 1e-12


def _fd_check(fn, vjp, x, rtol=1e-4, h=1e-5):
    rng = np.random.default_rng(0)
    up = rng.uniform(-1, 1, size=fn(x).shape)
    analytic = vjp(x, up)
    numeric = np.zeros_like(x)
    flat = x.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = float(np.sum(fn(x) * up))
        flat[i] = orig - h
        lm = float(np.sum(fn(x) * up))
        flat[i] = orig
        nflat[i] = (lp - lm) / (2 * h)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    denom[denom < 1e-8] = 1.0
    assert np.max(np.abs(analytic - numeric) / denom) < rtol


def test_vjps_match_finite_differences():
    rng = np.random.default_rng(11)
    w = rng.uniform(-1, 1, size=(4, 5))
    x = rng.uniform(-1, 1, size=5)
    b = rng.uniform(-1, 1, size=4)

    _fd_check(lambda xx: apply_linear(w, xx, b), lambda xx, up: apply_linear_vjp(w, xx, up, b)[1], x.copy())
    _fd_check(lambda ww: apply_linear(ww, x, b), lambda ww, up: apply_linear_vjp(ww, x, up, b)[0], w.copy())

    gain = rng.uniform(0.5, 1.5, size=5)
    shift = rng.uniform(-1, 1, size=5)
    _fd_check(lambda xx: apply_layer_norm(xx, gain, shift), lambda xx, up: apply_layer_norm_vjp(xx, gain, shift, up)[0], x.copy())
    _fd_check(lambda gg: apply_layer_norm(x, gg, shift), lambda gg, up: apply_layer_norm_vjp(x, gg, shift, up)[1], gain.copy())

    for kind in ("softmax", "tanh", "sigmoid"):
        _fd_check(lambda xx: apply_activation(kind, xx), lambda xx, up: apply_activation_vjp(kind, xx, up), x.copy())


def test_param_store_flatten_roundtrip():
    store = ParamStore(rng_seed=5)
    store.add_uniform("a", (3, 4), fan_in=4)
    store.add_uniform("b", (7,), fan_in=7)
    store.add_ones("g", (2,))
    flat = store.flatten()
    before = {k: v.copy() for k, v in store.items()}
    store.load_flat(np.zeros_like(flat))
    store.load_flat(flat)
    for k, v in store.items():
        assert np.array_equal(v, before[k])
    assert store.names() == ["a", "b", "g"]


def test_param_store_deterministic_init():
    a = ParamStore(rng_seed=9)
    a.add_uniform("w", (4, 4), fan_in=4)
    b = ParamStore(rng_seed=9)
    b.add_uniform("w", (4, 4), fan_in=4)
    assert np.array_equal(a["w"], b["w"])


def test_adam_zero_grad_keeps_params():
    store = ParamStore()
    store.add("p", np.array([1.0, -2.0]))
    st = AdamState.for_params(store, lr=0.1)
    adam_update(store, {"p": np.zeros(2)}, st)
    assert np.allclose(store["p"], [1.0, -2.0])


def test_adam_first_step_magnitude():
    store = ParamStore()
    store.add("p", np.array([0.0]))
    st = AdamState.for_params(store, lr=0.1)
    adam_update(store, {"p": np.array([1.0])}, st)
    assert abs(store["p"][0] + 0.1) < 1e-7


def test_adam_consistent_direction():
    store = ParamStore()
    store.add("p", np.array([0.0]))
    st = AdamState.for_params(store, lr=0.05)
    adam_update(store, {"p": np.array([2.0])}, st)
    first = store["p"][0]
    adam_update(store, {"p": np.array([2.0])}, st)
    second = store["p"][0] - first
    assert first < 0 and second < 0


def test_adam_misaligned_names_reported():
    store = ParamStore()
    store.add("p", np.zeros(1))
    st = AdamState.for_params(store, lr=0.1)
    with pytest.raises(GradAlignmentError) as ei:
        adam_update(store, {"q": np.zeros(1)}, st)
    assert "p" in str(ei.value) and "q" in str(ei.value)


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    store = ParamStore(rng_seed=2)
    store.add_uniform("layer.w", (5, 3), fan_in=3)
    store.add("odd", np.array([1e-300, -1.5, np.pi, 1 / 3]))
    store.add("scalarish", np.array(2.0).reshape(()))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, meta={"mode": "ncde", "rule": "delta"})
    meta, entries = load_checkpoint(path)
    assert meta == {"mode": "ncde", "rule": "delta"}
    for name, arr in store.items():
        assert entries[name].shape == arr.shape
        assert np.array_equal(entries[name], arr), name

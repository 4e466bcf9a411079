"""Continuous-time fast-weight cells and their discrete-time oracles.

The state of every continuous cell is a stack of per-head fast weight
matrices W (H, d_head, d_head), flattened for the ODE solver. Two field
families are provided:

* direct fields: the control value x(t) enters the vector field directly and
  the learning rule (hebb / oja / delta) consumes key/value projections of a
  layer-normalized x(t);
* cde fields: the field is multiplied from the right by x'(t), so x'-derived
  factors stay linear (no activation) while x-derived factors get the usual
  layer norm + softmax keys + tanh values treatment.

Per-head fast weights are square, so each rule's outer-product update and the
matching read orientation (W q vs W^T q) are tracked per rule. Also here: the
DeltaNet / linear-Transformer discrete step, the recurrent fast-weight step
driven by an autonomous ODE between observations, the plain matrix-valued
NCDE baseline field, and the classic single-neuron Oja rule field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import OrderingError
from .numcore import (
    apply_activation,
    apply_activation_vjp,
    apply_layer_norm,
    apply_layer_norm_vjp,
    apply_linear,
)
from .solver import ode_solve

Array = np.ndarray


@dataclass
class RuleConfig:
    rule: str = "delta"  # hebb | oja | delta
    delta_variant: str = "pre"  # pre | post (tanh before vs around the error term)
    cde_input: str = "x_and_dx"  # x_and_dx | dx_only
    hebb_kv_swap: bool = False  # cde hebb: keys from x' and values from x

    def validate(self) -> None:
        if self.rule not in ("hebb", "oja", "delta"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.delta_variant not in ("pre", "post"):
            raise ValueError(f"unknown delta variant {self.delta_variant!r}")
        if self.cde_input not in ("x_and_dx", "dx_only"):
            raise ValueError(f"unknown cde input variant {self.cde_input!r}")
        if self.hebb_kv_swap and self.rule != "hebb":
            raise ValueError("hebb_kv_swap only applies to the hebb rule")


def _sigmoid(x: Array) -> Array:
    return 1.0 / (1.0 + np.exp(-x))


def _heads(vec: Array, heads: int) -> Array:
    return vec.reshape(heads, -1)


def _softmax_rows(z: Array) -> Array:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rows_vjp(s: Array, upstream: Array) -> Array:
    return s * (upstream - (upstream * s).sum(axis=-1, keepdims=True))


def _outer(lr: Array, a: Array, b: Array) -> Array:
    return np.einsum("h,hi,hj->hij", lr, a, b)


# ---------------------------------------------------------------------------
# slow projections (direct family)


def slow_projections(w_slow: Array, ln_gain: Array, ln_shift: Array, x: Array, heads: int, value_tanh: bool = True):
    """Layer-normalized input through the slow generator.

    Row layout of w_slow: one learning-rate logit per head, then key logits,
    then value logits. Returns (lr, k, v) with lr = sigmoid(beta) per head,
    per-head softmax keys, and tanh values (raw logits when value_tanh is
    False, i.e. the post-delta variant defers the squashing to the field).
    """
    u = apply_layer_norm(x, ln_gain, ln_shift)
    rows = apply_linear(w_slow, u)
    beta = rows[:heads]
    rest = rows[heads:]
    half = rest.shape[0] // 2
    klog = _heads(rest[:half], heads)
    vlog = _heads(rest[half:], heads)
    lr = _sigmoid(beta)
    k = _softmax_rows(klog)
    v = np.tanh(vlog) if value_tanh else vlog
    return lr, k, v


# ---------------------------------------------------------------------------
# direct-NODE field, one layer


def direct_field(rule: RuleConfig, p: dict, W: Array, x: Array, heads: int):
    """dW for the direct family; p holds w_slow, ln_gain, ln_shift."""
    dW, _ = _direct_layer_eval(rule, p, W, x, heads)
    return dW


def _direct_layer_eval(rule: RuleConfig, p: dict, W: Array, x: Array, heads: int):
    u = apply_layer_norm(x, p["ln_gain"], p["ln_shift"])
    rows = p["w_slow"] @ u
    beta = rows[:heads]
    rest = rows[heads:]
    half = rest.shape[0] // 2
    klog = _heads(rest[:half], heads)
    vlog = _heads(rest[half:], heads)
    lr = _sigmoid(beta)
    k = _softmax_rows(klog)
    cache = {"x": x, "u": u, "lr": lr, "k": k, "klog": klog, "vlog": vlog, "W": W}
    if rule.rule == "hebb":
        v = np.tanh(vlog)
        dW = _outer(lr, k, v)  # key rows, value columns; read through the transpose
        cache.update(v=v)
    elif rule.rule == "oja":
        v = np.tanh(vlog)
        m = k - np.einsum("hij,hi->hj", W, v)  # k - W^T v
        dW = _outer(lr, v, m)
        cache.update(v=v, m=m)
    elif rule.delta_variant == "pre":
        v = np.tanh(vlog)
        e = v - np.einsum("hij,hj->hi", W, k)
        dW = _outer(lr, e, k)
        cache.update(v=v, e=e)
    else:  # post-delta: tanh wraps the error term
        z = vlog - np.einsum("hij,hj->hi", W, k)
        g = np.tanh(z)
        dW = _outer(lr, g, k)
        cache.update(g=g)
    return dW, cache


def _direct_layer_vjp(rule: RuleConfig, p: dict, cache: dict, A: Array, heads: int):
    """Pull upstream A (H, dh, dh) back to (Wbar, xbar, param grads)."""
    lr, k, W = cache["lr"], cache["k"], cache["W"]
    lrcol = lr[:, None]
    if rule.rule == "hebb":
        v = cache["v"]
        kbar = lrcol * np.einsum("hij,hj->hi", A, v)
        vbar = lrcol * np.einsum("hij,hi->hj", A, k)
        lrbar = np.einsum("hij,hi,hj->h", A, k, v)
        vlogbar = vbar * (1.0 - v * v)
        Wbar = np.zeros_like(W)
    elif rule.rule == "oja":
        v, m = cache["v"], cache["m"]
        vbar = lrcol * np.einsum("hij,hj->hi", A, m)
        mbar = lrcol * np.einsum("hij,hi->hj", A, v)
        lrbar = np.einsum("hij,hi,hj->h", A, v, m)
        kbar = mbar.copy()
        vbar = vbar - np.einsum("hij,hj->hi", W, mbar)  # through m = k - W^T v
        Wbar = -np.einsum("hi,hj->hij", v, mbar)
        vlogbar = vbar * (1.0 - v * v)
    elif rule.delta_variant == "pre":
        v, e = cache["v"], cache["e"]
        ebar = lrcol * np.einsum("hij,hj->hi", A, k)
        kbar = lrcol * np.einsum("hij,hi->hj", A, e)
        lrbar = np.einsum("hij,hi,hj->h", A, e, k)
        vbar = ebar
        kbar = kbar - np.einsum("hij,hi->hj", W, ebar)  # through e = v - W k
        Wbar = -np.einsum("hi,hj->hij", ebar, k)
        vlogbar = vbar * (1.0 - v * v)
    else:
        g = cache["g"]
        gbar = lrcol * np.einsum("hij,hj->hi", A, k)
        kbar = lrcol * np.einsum("hij,hi->hj", A, g)
        lrbar = np.einsum("hij,hi,hj->h", A, g, k)
        zbar = gbar * (1.0 - g * g)
        vlogbar = zbar
        kbar = kbar - np.einsum("hij,hi->hj", W, zbar)
        Wbar = -np.einsum("hi,hj->hij", zbar, k)
    betabar = lrbar * lr * (1.0 - lr)
    klogbar = _softmax_rows_vjp(k, kbar)
    rowsbar = np.concatenate([betabar, klogbar.ravel(), vlogbar.ravel()])
    w_slow_bar = np.outer(rowsbar, cache["u"])
    ubar = p["w_slow"].T @ rowsbar
    xbar, gain_bar, shift_bar = apply_layer_norm_vjp(cache["x"], p["ln_gain"], p["ln_shift"], ubar)
    grads = {"w_slow": w_slow_bar, "ln_gain": gain_bar, "ln_shift": shift_bar}
    return Wbar, xbar, grads


# ---------------------------------------------------------------------------
# CDE field, one layer. x feeds the normalized/activated slot, x' stays raw so
# the field remains linear in the control differential where the rule allows.


def cde_field(rule: RuleConfig, p: dict, W: Array, x: Array, dx: Array, heads: int):
    """dW for the cde family; p holds w_beta, w_key, w_value, ln_gain, ln_shift."""
    dW, _ = _cde_layer_eval(rule, p, W, x, dx, heads)
    return dW


def _cde_layer_eval(rule: RuleConfig, p: dict, W: Array, x: Array, dx: Array, heads: int):
    xs = dx if rule.cde_input == "dx_only" else x
    u = apply_layer_norm(xs, p["ln_gain"], p["ln_shift"])
    beta = p["w_beta"] @ u
    lr = _sigmoid(beta)
    cache = {"xs": xs, "dx": dx, "u": u, "lr": lr, "W": W}
    if rule.rule == "hebb" and not rule.hebb_kv_swap:
        klog = _heads(p["w_key"] @ u, heads)
        k = _softmax_rows(klog)
        vd = _heads(p["w_value"] @ dx, heads)
        dW = _outer(lr, k, vd)  # key rows, value columns
        cache.update(k=k, vd=vd)
    elif rule.rule == "hebb":
        vlog = _heads(p["w_value"] @ u, heads)
        v = np.tanh(vlog)
        kd = _heads(p["w_key"] @ dx, heads)
        dW = _outer(lr, v, kd)  # value rows, key columns
        cache.update(v=v, vlog=vlog, kd=kd)
    elif rule.rule == "oja":
        klog = _heads(p["w_key"] @ u, heads)
        k = _softmax_rows(klog)
        vd = _heads(p["w_value"] @ dx, heads)
        m = k - np.einsum("hij,hj->hi", W, vd)  # decay removes the stored component
        dW = _outer(lr, m, vd)
        cache.update(k=k, vd=vd, m=m)
    elif rule.delta_variant == "pre":
        vlog = _heads(p["w_value"] @ u, heads)
        v = np.tanh(vlog)
        kd = _heads(p["w_key"] @ dx, heads)
        e = v - np.einsum("hij,hj->hi", W, kd)
        dW = _outer(lr, e, kd)
        cache.update(v=v, vlog=vlog, kd=kd, e=e)
    else:  # post-delta
        vlog = _heads(p["w_value"] @ u, heads)
        kd = _heads(p["w_key"] @ dx, heads)
        z = vlog - np.einsum("hij,hj->hi", W, kd)
        g = np.tanh(z)
        dW = _outer(lr, g, kd)
        cache.update(vlog=vlog, kd=kd, g=g)
    return dW, cache


def _cde_layer_vjp(rule: RuleConfig, p: dict, cache: dict, A: Array, heads: int):
    lr, W, u, dx = cache["lr"], cache["W"], cache["u"], cache["dx"]
    lrcol = lr[:, None]
    w_key_bar = np.zeros_like(p["w_key"])
    w_value_bar = np.zeros_like(p["w_value"])
    ubar = np.zeros_like(u)
    dxbar = np.zeros_like(dx)
    if rule.rule == "hebb" and not rule.hebb_kv_swap:
        k, vd = cache["k"], cache["vd"]
        kbar = lrcol * np.einsum("hij,hj->hi", A, vd)
        vdbar = lrcol * np.einsum("hij,hi->hj", A, k)
        lrbar = np.einsum("hij,hi,hj->h", A, k, vd)
        Wbar = np.zeros_like(W)
        klogbar = _softmax_rows_vjp(k, kbar).ravel()
        w_key_bar += np.outer(klogbar, u)
        ubar += p["w_key"].T @ klogbar
        w_value_bar += np.outer(vdbar.ravel(), dx)
        dxbar += p["w_value"].T @ vdbar.ravel()
    elif rule.rule == "hebb":
        v, kd = cache["v"], cache["kd"]
        vbar = lrcol * np.einsum("hij,hj->hi", A, kd)
        kdbar = lrcol * np.einsum("hij,hi->hj", A, v)
        lrbar = np.einsum("hij,hi,hj->h", A, v, kd)
        Wbar = np.zeros_like(W)
        vlogbar = (vbar * (1.0 - v * v)).ravel()
        w_value_bar += np.outer(vlogbar, u)
        ubar += p["w_value"].T @ vlogbar
        w_key_bar += np.outer(kdbar.ravel(), dx)
        dxbar += p["w_key"].T @ kdbar.ravel()
    elif rule.rule == "oja":
        k, vd, m = cache["k"], cache["vd"], cache["m"]
        mbar = lrcol * np.einsum("hij,hj->hi", A, vd)
        vdbar = lrcol * np.einsum("hij,hi->hj", A, m)
        lrbar = np.einsum("hij,hi,hj->h", A, m, vd)
        kbar = mbar.copy()
        vdbar = vdbar - np.einsum("hij,hi->hj", W, mbar)  # through m = k - W vd
        Wbar = -np.einsum("hi,hj->hij", mbar, vd)
        klogbar = _softmax_rows_vjp(k, kbar).ravel()
        w_key_bar += np.outer(klogbar, u)
        ubar += p["w_key"].T @ klogbar
        w_value_bar += np.outer(vdbar.ravel(), dx)
        dxbar += p["w_value"].T @ vdbar.ravel()
    elif rule.delta_variant == "pre":
        v, kd, e = cache["v"], cache["kd"], cache["e"]
        ebar = lrcol * np.einsum("hij,hj->hi", A, kd)
        kdbar = lrcol * np.einsum("hij,hi->hj", A, e)
        lrbar = np.einsum("hij,hi,hj->h", A, e, kd)
        vbar = ebar
        kdbar = kdbar - np.einsum("hij,hi->hj", W, ebar)
        Wbar = -np.einsum("hi,hj->hij", ebar, kd)
        vlogbar = (vbar * (1.0 - v * v)).ravel()
        w_value_bar += np.outer(vlogbar, u)
        ubar += p["w_value"].T @ vlogbar
        w_key_bar += np.outer(kdbar.ravel(), dx)
        dxbar += p["w_key"].T @ kdbar.ravel()
    else:
        kd, g = cache["kd"], cache["g"]
        gbar = lrcol * np.einsum("hij,hj->hi", A, kd)
        kdbar = lrcol * np.einsum("hij,hi->hj", A, g)
        lrbar = np.einsum("hij,hi,hj->h", A, g, kd)
        zbar = gbar * (1.0 - g * g)
        vlogbar = zbar.ravel()
        kdbar = kdbar - np.einsum("hij,hi->hj", W, zbar)
        Wbar = -np.einsum("hi,hj->hij", zbar, kd)
        w_value_bar += np.outer(vlogbar, u)
        ubar += p["w_value"].T @ vlogbar
        w_key_bar += np.outer(kdbar.ravel(), dx)
        dxbar += p["w_key"].T @ kdbar.ravel()
    betabar = lrbar * lr * (1.0 - lr)
    w_beta_bar = np.outer(betabar, u)
    ubar += p["w_beta"].T @ betabar
    xsbar, gain_bar, shift_bar = apply_layer_norm_vjp(cache["xs"], p["ln_gain"], p["ln_shift"], ubar)
    if rule.cde_input == "dx_only":
        dxbar = dxbar + xsbar
        xbar = np.zeros_like(xsbar)
    else:
        xbar = xsbar
    grads = {
        "w_beta": w_beta_bar,
        "w_key": w_key_bar,
        "w_value": w_value_bar,
        "ln_gain": gain_bar,
        "ln_shift": shift_bar,
    }
    return Wbar, xbar, dxbar, grads


# ---------------------------------------------------------------------------
# querying / readout


def read_transposed(rule: RuleConfig, family: str) -> bool:
    """Whether the fast matrix is read through its transpose (key rows)."""
    if family == "direct":
        return rule.rule == "hebb"
    if rule.rule == "hebb":
        return not rule.hebb_kv_swap
    return rule.rule == "oja"


def query_uses_dx(rule: RuleConfig) -> bool:
    """cde family: delta and swapped hebb generate the query from x'."""
    return rule.rule == "delta" or (rule.rule == "hebb" and rule.hebb_kv_swap)


def query_readout(rule: RuleConfig, family: str, w_query: Array, W: Array, xq: Array, heads: int):
    """y(T): per-head softmax query into the fast matrix, heads concatenated."""
    y, _ = _query_readout_eval(rule, family, w_query, W, xq, heads)
    return y


def _query_readout_eval(rule: RuleConfig, family: str, w_query: Array, W: Array, xq: Array, heads: int):
    qlog = _heads(w_query @ xq, heads)
    q = _softmax_rows(qlog)
    if read_transposed(rule, family):
        yh = np.einsum("hij,hi->hj", W, q)
    else:
        yh = np.einsum("hij,hj->hi", W, q)
    cache = {"xq": xq, "q": q, "W": W, "transposed": read_transposed(rule, family)}
    return yh.ravel(), cache


def _query_readout_vjp(w_query: Array, cache: dict, ybar_flat: Array, heads: int):
    q, W = cache["q"], cache["W"]
    ybar = _heads(ybar_flat, heads)
    if cache["transposed"]:
        qbar = np.einsum("hij,hj->hi", W, ybar)
        Wbar = np.einsum("hi,hj->hij", q, ybar)
    else:
        qbar = np.einsum("hij,hi->hj", W, ybar)
        Wbar = np.einsum("hi,hj->hij", ybar, q)
    qlogbar = _softmax_rows_vjp(q, qbar).ravel()
    w_query_bar = np.outer(qlogbar, cache["xq"])
    xqbar = w_query.T @ qlogbar
    return Wbar, xqbar, w_query_bar


# ---------------------------------------------------------------------------
# feed-forward block: layer norm -> linear -> tanh -> linear -> residual add


def ffn_block(p: dict, y: Array):
    out, _ = _ffn_eval(p, y)
    return out


def _ffn_eval(p: dict, y: Array):
    ln = apply_layer_norm(y, p["ffn_ln_gain"], p["ffn_ln_shift"])
    h1 = p["ffn_w1"] @ ln + p["ffn_b1"]
    a = np.tanh(h1)
    h2 = p["ffn_w2"] @ a + p["ffn_b2"]
    out = y + h2
    return out, {"y": y, "ln": ln, "a": a}


def _ffn_vjp(p: dict, cache: dict, outbar: Array):
    a, ln, y = cache["a"], cache["ln"], cache["y"]
    h2bar = outbar
    w2_bar = np.outer(h2bar, a)
    b2_bar = h2bar.copy()
    abar = p["ffn_w2"].T @ h2bar
    h1bar = abar * (1.0 - a * a)
    w1_bar = np.outer(h1bar, ln)
    b1_bar = h1bar.copy()
    lnbar = p["ffn_w1"].T @ h1bar
    ybar_ln, gain_bar, shift_bar = apply_layer_norm_vjp(y, p["ffn_ln_gain"], p["ffn_ln_shift"], lnbar)
    ybar = outbar + ybar_ln
    grads = {
        "ffn_w1": w1_bar,
        "ffn_b1": b1_bar,
        "ffn_w2": w2_bar,
        "ffn_b2": b2_bar,
        "ffn_ln_gain": gain_bar,
        "ffn_ln_shift": shift_bar,
    }
    return ybar, grads


def layer_output(rule: RuleConfig, family: str, p: dict, W: Array, x_in: Array, heads: int):
    """Instantaneous readout of one layer: query, read, feed-forward block."""
    out, _, _ = _layer_output_eval(rule, family, p, W, x_in, heads)
    return out


def _layer_output_eval(rule: RuleConfig, family: str, p: dict, W: Array, x_in: Array, heads: int):
    y, qcache = _query_readout_eval(rule, family, p["w_query"], W, x_in, heads)
    out, fcache = _ffn_eval(p, y)
    return out, qcache, fcache


def _layer_output_vjp(rule: RuleConfig, p: dict, qcache: dict, fcache: dict, outbar: Array, heads: int):
    ybar, ffn_grads = _ffn_vjp(p, fcache, outbar)
    Wbar, xbar, w_query_bar = _query_readout_vjp(p["w_query"], qcache, ybar, heads)
    grads = dict(ffn_grads)
    grads["w_query"] = w_query_bar
    return Wbar, xbar, grads


# ---------------------------------------------------------------------------
# field objects consumed by the solver / adjoint


class FieldBase:
    """Shared flat-theta plumbing; subclasses set self.theta (ordered name->array)."""

    def _init_theta(self, theta: list):
        self.theta = theta
        self.n_theta = sum(arr.size for _, arr in theta)

    def pack_theta_grads(self, grads: dict) -> Array:
        if not self.theta:
            return np.zeros(0)
        return np.concatenate([grads[name].ravel() for name, _ in self.theta])

    def unpack_theta_grads(self, flat: Array) -> dict:
        out = {}
        ofs = 0
        for name, arr in self.theta:
            out[name] = flat[ofs : ofs + arr.size].reshape(arr.shape)
            ofs += arr.size
        return out


class DirectStackField(FieldBase):
    """Coupled system of L direct-NODE fast-weight layers.

    Layer l consumes the instantaneous feed-forward readout of layer l-1;
    layer 1 consumes the external control value. The joint ODE state is the
    concatenation of all layers' flattened fast weights.
    """

    def __init__(self, rule: RuleConfig, heads: int, d_head: int, layers: list, readouts: list, control_value):
        # layers: per-layer dict of field arrays; readouts: dicts for layers 1..L-1
        self.rule = rule
        self.heads = heads
        self.d_head = d_head
        self.layers = layers
        self.readouts = readouts
        self.control_value = control_value
        self.n_layers = len(layers)
        self.per_layer = heads * d_head * d_head
        self.state_dim = self.n_layers * self.per_layer
        theta = []
        for li, p in enumerate(layers):
            for key in ("w_slow", "ln_gain", "ln_shift"):
                theta.append((f"l{li}.{key}", p[key]))
        for li, p in enumerate(readouts):
            for key in ("w_query", "ffn_ln_gain", "ffn_ln_shift", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                theta.append((f"l{li}.{key}", p[key]))
        self._init_theta(theta)

    def _split(self, w_flat: Array) -> list:
        return [
            w_flat[i * self.per_layer : (i + 1) * self.per_layer].reshape(self.heads, self.d_head, self.d_head)
            for i in range(self.n_layers)
        ]

    def eval(self, t: float, w_flat: Array) -> Array:
        Ws = self._split(w_flat)
        x = self.control_value(t)
        out = np.empty_like(w_flat)
        for li in range(self.n_layers):
            dW, _ = _direct_layer_eval(self.rule, self.layers[li], Ws[li], x, self.heads)
            out[li * self.per_layer : (li + 1) * self.per_layer] = dW.ravel()
            if li < self.n_layers - 1:
                x = layer_output(self.rule, "direct", self.readouts[li], Ws[li], x, self.heads)
        return out

    def vjp(self, t: float, w_flat: Array, a_flat: Array):
        Ws = self._split(w_flat)
        x = self.control_value(t)
        xs, field_caches, out_caches = [], [], []
        f = np.empty_like(w_flat)
        for li in range(self.n_layers):
            xs.append(x)
            dW, fc = _direct_layer_eval(self.rule, self.layers[li], Ws[li], x, self.heads)
            field_caches.append(fc)
            f[li * self.per_layer : (li + 1) * self.per_layer] = dW.ravel()
            if li < self.n_layers - 1:
                x, qc, oc = _layer_output_eval(self.rule, "direct", self.readouts[li], Ws[li], x, self.heads)
                out_caches.append((qc, oc))
        abar = np.empty_like(w_flat)
        grads: dict = {}
        xbar = None  # cotangent flowing down through the inter-layer readouts
        for li in range(self.n_layers - 1, -1, -1):
            A = a_flat[li * self.per_layer : (li + 1) * self.per_layer].reshape(self.heads, self.d_head, self.d_head)
            Wbar, xinbar, fgrads = _direct_layer_vjp(self.rule, self.layers[li], field_caches[li], A, self.heads)
            for key, g in fgrads.items():
                grads[f"l{li}.{key}"] = g
            if li < self.n_layers - 1 and xbar is not None:
                qc, oc = out_caches[li]
                Wbar_o, xinbar_o, ograds = _layer_output_vjp(self.rule, self.readouts[li], qc, oc, xbar, self.heads)
                Wbar = Wbar + Wbar_o
                xinbar = xinbar + xinbar_o
                for key, g in ograds.items():
                    grads[f"l{li}.{key}"] = g
            abar[li * self.per_layer : (li + 1) * self.per_layer] = Wbar.ravel()
            xbar = xinbar
        return f, abar, self.pack_theta_grads(grads)


class CDEField(FieldBase):
    """Single fast-weight layer driven by a control path and its derivative."""

    def __init__(self, rule: RuleConfig, heads: int, d_head: int, p: dict, control_value, control_deriv):
        self.rule = rule
        self.heads = heads
        self.d_head = d_head
        self.p = p
        self.control_value = control_value
        self.control_deriv = control_deriv
        self.state_dim = heads * d_head * d_head
        self._init_theta([(f"l0.{key}", p[key]) for key in ("w_beta", "w_key", "w_value", "ln_gain", "ln_shift")])

    def eval(self, t: float, w_flat: Array) -> Array:
        W = w_flat.reshape(self.heads, self.d_head, self.d_head)
        dW, _ = _cde_layer_eval(self.rule, self.p, W, self.control_value(t), self.control_deriv(t), self.heads)
        return dW.ravel()

    def vjp(self, t: float, w_flat: Array, a_flat: Array):
        W = w_flat.reshape(self.heads, self.d_head, self.d_head)
        A = a_flat.reshape(self.heads, self.d_head, self.d_head)
        dW, cache = _cde_layer_eval(self.rule, self.p, W, self.control_value(t), self.control_deriv(t), self.heads)
        Wbar, _, _, grads = _cde_layer_vjp(self.rule, self.p, cache, A, self.heads)
        return dW.ravel(), Wbar.ravel(), self.pack_theta_grads(grads)


class VanillaNCDEField(FieldBase):
    """Baseline cell: dh = F(h) x' with F a small net mapping h to a d x d_in matrix."""

    def __init__(self, p: dict, d: int, d_in: int, control_deriv):
        self.p = p  # mlp_w0, mlp_b0, ..., final layer emits d*d_in entries
        self.d = d
        self.d_in = d_in
        self.control_deriv = control_deriv
        self.state_dim = d
        self.n_hidden = sum(1 for key in p if key.startswith("mlp_w")) - 1
        theta = []
        for i in range(self.n_hidden + 1):
            theta.append((f"mlp_w{i}", p[f"mlp_w{i}"]))
            theta.append((f"mlp_b{i}", p[f"mlp_b{i}"]))
        self._init_theta(theta)

    def _matrix(self, h: Array):
        acts = [h]
        z = h
        for i in range(self.n_hidden):
            z = np.tanh(self.p[f"mlp_w{i}"] @ z + self.p[f"mlp_b{i}"])
            acts.append(z)
        last = self.n_hidden
        raw = self.p[f"mlp_w{last}"] @ z + self.p[f"mlp_b{last}"]
        M = np.tanh(raw).reshape(self.d, self.d_in)
        return M, acts

    def matrix(self, h: Array) -> Array:
        return self._matrix(h)[0]

    def eval(self, t: float, h: Array) -> Array:
        M, _ = self._matrix(h)
        return M @ self.control_deriv(t)

    def vjp(self, t: float, h: Array, a: Array):
        dx = self.control_deriv(t)
        M, acts = self._matrix(h)
        f = M @ dx
        Mbar = np.outer(a, dx)
        rawbar = (Mbar * (1.0 - M * M)).ravel()
        grads = {}
        last = self.n_hidden
        zbar = rawbar
        for i in range(last, -1, -1):
            grads[f"mlp_w{i}"] = np.outer(zbar, acts[i])
            grads[f"mlp_b{i}"] = zbar.copy()
            zbar = self.p[f"mlp_w{i}"].T @ zbar
            if i > 0:
                zbar = zbar * (1.0 - acts[i] * acts[i])
        return f, zbar, self.pack_theta_grads(grads)


def vanilla_ncde_field(p: dict, d: int, d_in: int, h: Array, dx: Array) -> Array:
    """Functional form of the baseline cell: dh = F(h) dx."""
    fld = VanillaNCDEField(p, d, d_in, control_deriv=lambda t: dx)
    return fld.eval(0.0, h)


# ---------------------------------------------------------------------------
# discrete-time oracles


def discrete_fwp_step(rule: str, w_slow: Array, x: Array, w_prev: Array, phi: str = "softmax"):
    """One DeltaNet (rule="delta") or linear-Transformer (rule="hebb") step.

    w_slow rows: [beta, query (d_key), key (d_key), value (d_out)]. The hebb
    branch uses the fixed learning rate 1. Returns (y, W_new).
    """
    d_out, d_key = w_prev.shape
    expected = 1 + 2 * d_key + d_out
    if w_slow.shape[0] != expected:
        raise ValueError(f"w_slow has {w_slow.shape[0]} rows, fast matrix of shape {w_prev.shape} needs {expected}")
    rows = apply_linear(w_slow, x)
    beta = rows[0]
    q = apply_activation(phi, rows[1 : 1 + d_key])
    k = apply_activation(phi, rows[1 + d_key : 1 + 2 * d_key])
    v = rows[1 + 2 * d_key :]
    if rule == "delta":
        lr = float(_sigmoid(np.array([beta]))[0])
        w_new = w_prev + lr * np.outer(v - w_prev @ k, k)
    elif rule == "hebb":
        w_new = w_prev + np.outer(v, k)
    else:
        raise ValueError(f"unsupported discrete rule {rule!r}")
    y = w_new @ q
    return y, w_new


def ode_rfwp_step(latent_field, rfwp_w_slow: Array, h_prev: Array, w_prev: Array, x: Array, t_prev: float, t_now: float, cfg):
    """Autonomous ODE drift of the recurrent state between observations, then
    one discrete fast-weight update on [x, u]."""
    if t_now < t_prev:
        raise OrderingError(f"observation times must not decrease: {t_prev:g} -> {t_now:g}")
    if t_now == t_prev:
        u = h_prev.copy()
    else:
        u = ode_solve(latent_field, h_prev, t_prev, t_now, cfg)
    h_new, w_new = discrete_fwp_step("delta", rfwp_w_slow, np.concatenate([x, u]), w_prev)
    return h_new, w_new


def oja_classic_field(w: Array, x: Array, eta: float = 1.0) -> Array:
    """Classic single-output Oja rule as a vector field: dW = eta y (x - W^T y)."""
    w = np.atleast_2d(w)
    y = w @ x
    return eta * np.outer(y, x - w.T @ y)

"""End-to-end sequence classifiers built from the fast-weight fields.

A model owns a ParamStore, prepares raw records into control providers for
its mode, integrates the fast weights over the observation span, reads the
terminal state out through query + feed-forward + linear classifier, and
produces exact parameter gradients: direct chain-rule vjps for everything
downstream of the terminal state, the continuous adjoint for everything
inside the vector field.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import control as ctl
from .adjoint import backward_adjoint
from .fwp import (
    CDEField,
    DirectStackField,
    RuleConfig,
    VanillaNCDEField,
    _layer_output_eval,
    _layer_output_vjp,
    query_uses_dx,
)
from .logsig import logsig_dim, windowize
from .numcore import ParamStore
from .solver import SolveConfig, ode_solve

Array = np.ndarray

CONTINUOUS_MODES = ("direct_node", "ncde", "nrde", "vanilla_ncde")

FFN_KEYS = ("ffn_ln_gain", "ffn_ln_shift", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


@dataclass
class ModelConfig:
    mode: str = "ncde"
    rule: RuleConfig = dc_field(default_factory=RuleConfig)
    d_model: int = 16
    heads: int = 2
    d_ff: int = 32
    layers: int = 1
    d_in: int = 2  # effective control dimension (time channel / logsig features included)
    n_classes: int = 2
    static_dim: int = 0
    vanilla_hidden: int = 32
    interpolation: str = "natural_cubic"
    observation_masks: bool = False
    logsig_depth: int = 1
    logsig_step: int = 4
    nrde_wiring: str = "direct"  # direct | cde_interp
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in CONTINUOUS_MODES:
            raise ValueError(f"mode {self.mode!r} is not a trainable continuous mode")
        self.rule.validate()
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.layers > 1 and self.mode == "ncde":
            raise ValueError("stacked layers are only supported for the direct/nrde families")
        if self.interpolation not in ("natural_cubic", "linear"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.logsig_depth not in (1, 2):
            raise ValueError("logsig depth must be 1 or 2")
        if self.nrde_wiring not in ("direct", "cde_interp"):
            raise ValueError(f"unknown nrde wiring {self.nrde_wiring!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class PreparedSequence:
    t0: float
    t1: float
    x_end: Array  # control value at the terminal time
    dx_end: Optional[Array]
    control_value: object
    control_deriv: object
    static: Optional[Array]
    label: int
    n_knots: int


def _header_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


class SequenceModel:
    def __init__(self, cfg: ModelConfig, solve: Optional[SolveConfig] = None):
        cfg.validate()
        self.cfg = cfg
        self.solve = solve or SolveConfig()
        self.params = ParamStore(rng_seed=cfg.seed)
        self._build_params()

    # -- parameter layout ---------------------------------------------------

    def _layer_d_in(self, li: int) -> int:
        return self.cfg.d_in if li == 0 else self.cfg.d_model

    def _build_params(self) -> None:
        c = self.cfg
        p = self.params
        if c.mode == "vanilla_ncde":
            p.add_uniform("mlp_w0", (c.vanilla_hidden, c.d_model), fan_in=c.d_model)
            p.add_zeros("mlp_b0", (c.vanilla_hidden,))
            p.add_uniform("mlp_w1", (c.d_model * c.d_in, c.vanilla_hidden), fan_in=c.vanilla_hidden)
            p.add_zeros("mlp_b1", (c.d_model * c.d_in,))
            if c.static_dim:
                p.add_uniform("w_init", (c.d_model, c.static_dim), fan_in=c.static_dim)
        else:
            for li in range(c.layers):
                din = self._layer_d_in(li)
                if self._family() == "cde":
                    p.add_uniform(f"l{li}.w_beta", (c.heads, din), fan_in=din)
                    p.add_uniform(f"l{li}.w_key", (c.d_model, din), fan_in=din)
                    p.add_uniform(f"l{li}.w_value", (c.d_model, din), fan_in=din)
                else:
                    p.add_uniform(f"l{li}.w_slow", (c.heads + 2 * c.d_model, din), fan_in=din)
                p.add_ones(f"l{li}.ln_gain", (din,))
                p.add_zeros(f"l{li}.ln_shift", (din,))
            if c.static_dim:
                p.add_uniform("w_static", (c.static_dim, c.static_dim), fan_in=c.static_dim)
            for li in range(c.layers):
                din = self._layer_d_in(li)
                dq = din + (c.static_dim if li == c.layers - 1 else 0)
                p.add_uniform(f"l{li}.w_query", (c.d_model, dq), fan_in=dq)
                p.add_ones(f"l{li}.ffn_ln_gain", (c.d_model,))
                p.add_zeros(f"l{li}.ffn_ln_shift", (c.d_model,))
                p.add_uniform(f"l{li}.ffn_w1", (c.d_ff, c.d_model), fan_in=c.d_model)
                p.add_zeros(f"l{li}.ffn_b1", (c.d_ff,))
                p.add_uniform(f"l{li}.ffn_w2", (c.d_model, c.d_ff), fan_in=c.d_ff)
                p.add_zeros(f"l{li}.ffn_b2", (c.d_model,))
        p.add_uniform("w_cls", (c.n_classes, c.d_model), fan_in=c.d_model)
        p.add_zeros("b_cls", (c.n_classes,))

    def _family(self) -> str:
        if self.cfg.mode == "ncde":
            return "cde"
        if self.cfg.mode == "nrde" and self.cfg.nrde_wiring == "cde_interp":
            return "cde"
        return "direct"

    def _layer_arrays(self, li: int) -> dict:
        keys = ("w_beta", "w_key", "w_value", "ln_gain", "ln_shift") if self._family() == "cde" else ("w_slow", "ln_gain", "ln_shift")
        return {k: self.params[f"l{li}.{k}"] for k in keys}

    def _readout_arrays(self, li: int) -> dict:
        return {k: self.params[f"l{li}.{k}"] for k in ("w_query",) + FFN_KEYS}

    # -- record preparation -------------------------------------------------

    def prepare(self, record) -> PreparedSequence:
        """Turn a SequenceRecord into the mode's control provider."""
        c = self.cfg
        grid, dense = ctl.knots_from_record(record.times, record.values, record.mask, add_masks=c.observation_masks)
        static = None
        if c.static_dim:
            if record.static is None or record.static.shape[0] != c.static_dim:
                raise ValueError(f"record {getattr(record, 'name', '?')} lacks {c.static_dim} static features")
            static = np.asarray(record.static, dtype=np.float64)
        if c.mode == "nrde":
            stream = windowize(dense, c.logsig_step, c.logsig_depth)
            feats = stream.features
            n = feats.shape[0]
            if c.nrde_wiring == "direct":
                def value(t, feats=feats, n=n):
                    return feats[min(max(int(np.floor(t)), 0), n - 1)]
                return PreparedSequence(0.0, float(n), feats[-1], feats[-1], value, value, static, record.label, dense.shape[0])
            # cde_interp: linear path through cumulative features so the path
            # derivative on window k is exactly that window's feature vector
            cum = np.concatenate([np.zeros((1, feats.shape[1])), np.cumsum(feats, axis=0)])
            path = ctl.fit_path(np.arange(n + 1, dtype=np.float64), cum, kind="linear")
            value = lambda t: ctl.eval_control(path, t)
            deriv = lambda t: ctl.eval_control_derivative(path, t)
            return PreparedSequence(0.0, float(n), value(float(n)), deriv(float(n)), value, deriv, static, record.label, dense.shape[0])
        if dense.shape[0] == 1:
            x0 = dense[0]
            value = lambda t, x0=x0: x0
            deriv = lambda t, x0=x0: np.zeros_like(x0)
            return PreparedSequence(0.0, 0.0, x0, np.zeros_like(x0), value, deriv, static, record.label, 1)
        path = ctl.fit_path(grid, dense, kind=c.interpolation)
        value = lambda t: ctl.eval_control(path, t)
        deriv = lambda t: ctl.eval_control_derivative(path, t)
        t1 = float(grid[-1])
        return PreparedSequence(0.0, t1, value(t1), deriv(t1), value, deriv, static, record.label, dense.shape[0])

    # -- forward / backward -------------------------------------------------

    def make_field(self, prep: PreparedSequence):
        c = self.cfg
        if c.mode == "vanilla_ncde":
            p = {k: self.params[k] for k in self.params.names() if k.startswith("mlp_")}
            return VanillaNCDEField(p, c.d_model, c.d_in, prep.control_deriv)
        if self._family() == "cde":
            return CDEField(c.rule, c.heads, c.d_head, {**self._layer_arrays(0)}, prep.control_value, prep.control_deriv)
        layers = [self._layer_arrays(li) for li in range(c.layers)]
        readouts = [self._readout_arrays(li) for li in range(c.layers - 1)]
        return DirectStackField(c.rule, c.heads, c.d_head, layers, readouts, prep.control_value)

    def _initial_state(self, prep: PreparedSequence, fld) -> Array:
        if self.cfg.mode == "vanilla_ncde":
            if self.cfg.static_dim:
                return self.params["w_init"] @ prep.static
            return np.zeros(self.cfg.d_model)
        return np.zeros(fld.state_dim)

    def _query_base(self, prep: PreparedSequence) -> Array:
        c = self.cfg
        if self._family() == "cde" and (c.rule.cde_input == "dx_only" or query_uses_dx(c.rule)):
            return prep.dx_end
        return prep.x_end

    def _terminal_forward(self, prep: PreparedSequence, state_T: Array):
        """Readout chain at the terminal time; returns (logits, caches)."""
        c = self.cfg
        if c.mode == "vanilla_ncde":
            logits = self.params["w_cls"] @ state_T + self.params["b_cls"]
            return logits, {"z": state_T}
        per = c.heads * c.d_head * c.d_head
        family = self._family()
        x = self._query_base(prep)
        caches = []
        for li in range(c.layers):
            if li == c.layers - 1 and c.static_dim:
                x = np.concatenate([x, self.params["w_static"] @ prep.static])
            W = state_T[li * per : (li + 1) * per].reshape(c.heads, c.d_head, c.d_head)
            arrays = self._readout_arrays(li)
            out, qc, fc = _layer_output_eval(c.rule, family, arrays, W, x, c.heads)
            caches.append((arrays, qc, fc))
            x = out
        logits = self.params["w_cls"] @ x + self.params["b_cls"]
        return logits, {"z": x, "chain": caches}

    def _terminal_backward(self, prep: PreparedSequence, state_T: Array, term_cache, dlogits: Array):
        """Grads of everything downstream of state_T, plus the adjoint seed."""
        c = self.cfg
        grads: dict = {}
        z = term_cache["z"]
        grads["w_cls"] = np.outer(dlogits, z)
        grads["b_cls"] = dlogits.copy()
        zbar = self.params["w_cls"].T @ dlogits
        if c.mode == "vanilla_ncde":
            return grads, zbar
        per = c.heads * c.d_head * c.d_head
        seed = np.zeros_like(state_T)
        xbar = zbar
        for li in range(c.layers - 1, -1, -1):
            arrays, qc, fc = term_cache["chain"][li]
            Wbar, xinbar, ograds = _layer_output_vjp(c.rule, arrays, qc, fc, xbar, c.heads)
            for key, g in ograds.items():
                name = f"l{li}.{key}"
                grads[name] = grads.get(name, 0.0) + g
            seed[li * per : (li + 1) * per] = Wbar.ravel()
            if li == c.layers - 1 and c.static_dim:
                base_dim = xinbar.shape[0] - c.static_dim
                grads["w_static"] = np.outer(xinbar[base_dim:], prep.static)
                xinbar = xinbar[:base_dim]
            xbar = xinbar
        return grads, seed

    def predict_logits(self, prep: PreparedSequence) -> Array:
        fld = self.make_field(prep)
        h0 = self._initial_state(prep, fld)
        hT = h0 if prep.t1 == prep.t0 else ode_solve(fld.eval, h0, prep.t0, prep.t1, self.solve)
        logits, _ = self._terminal_forward(prep, hT)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits")
        return logits

    def loss(self, prep: PreparedSequence) -> float:
        """Forward-only cross-entropy (cheap path for finite differencing)."""
        loss, _ = softmax_cross_entropy(self.predict_logits(prep), prep.label)
        return loss

    def loss_and_grads(self, prep: PreparedSequence):
        """Cross-entropy loss at the terminal readout and exact parameter grads."""
        fld = self.make_field(prep)
        h0 = self._initial_state(prep, fld)
        hT = h0 if prep.t1 == prep.t0 else ode_solve(fld.eval, h0, prep.t0, prep.t1, self.solve)
        logits, term_cache = self._terminal_forward(prep, hT)
        loss, dlogits = softmax_cross_entropy(logits, prep.label)
        grads, seed = self._terminal_backward(prep, hT, term_cache, dlogits)
        if prep.t1 == prep.t0:
            dh0 = seed
        else:
            dh0, gflat = backward_adjoint(fld, hT, seed, prep.t0, prep.t1, self.solve)
            for name, g in fld.unpack_theta_grads(gflat).items():
                grads[name] = grads.get(name, 0.0) + g
        if self.cfg.mode == "vanilla_ncde" and self.cfg.static_dim:
            grads["w_init"] = np.outer(dh0, prep.static)
        full = self.params.grads_like()
        for name, g in grads.items():
            full[name] += g
        return loss, full

    def batch_loss_and_grads(self, preps: list):
        """Mean loss and mean grads over a batch (sequential, fixed order)."""
        total = 0.0
        acc = self.params.grads_like()
        for prep in preps:
            loss, grads = self.loss_and_grads(prep)
            total += loss
            for name in acc:
                acc[name] += grads[name]
        n = len(preps)
        for name in acc:
            acc[name] /= n
        return total / n, acc

    # -- checkpoint glue ----------------------------------------------------

    def arch_header(self) -> dict:
        c = self.cfg
        return {
            "mode": c.mode,
            "rule": c.rule.rule,
            "delta_variant": c.rule.delta_variant,
            "cde_input": c.rule.cde_input,
            "hebb_kv_swap": _header_value(c.rule.hebb_kv_swap),
            "d_model": c.d_model,
            "heads": c.heads,
            "d_ff": c.d_ff,
            "layers": c.layers,
            "d_in": c.d_in,
            "n_classes": c.n_classes,
            "static_dim": c.static_dim,
            "vanilla_hidden": c.vanilla_hidden,
            "interpolation": c.interpolation,
            "observation_masks": _header_value(c.observation_masks),
            "logsig_depth": c.logsig_depth,
            "logsig_step": c.logsig_step,
            "nrde_wiring": c.nrde_wiring,
            "seed": c.seed,
        }

    @classmethod
    def from_header(cls, meta: dict, solve: Optional[SolveConfig] = None) -> "SequenceModel":
        rule = RuleConfig(
            rule=meta["rule"],
            delta_variant=meta["delta_variant"],
            cde_input=meta["cde_input"],
            hebb_kv_swap=meta["hebb_kv_swap"] == "1",
        )
        cfg = ModelConfig(
            mode=meta["mode"],
            rule=rule,
            d_model=int(meta["d_model"]),
            heads=int(meta["heads"]),
            d_ff=int(meta["d_ff"]),
            layers=int(meta["layers"]),
            d_in=int(meta["d_in"]),
            n_classes=int(meta["n_classes"]),
            static_dim=int(meta["static_dim"]),
            vanilla_hidden=int(meta["vanilla_hidden"]),
            interpolation=meta["interpolation"],
            observation_masks=meta["observation_masks"] == "1",
            logsig_depth=int(meta["logsig_depth"]),
            logsig_step=int(meta["logsig_step"]),
            nrde_wiring=meta.get("nrde_wiring", "direct"),
            seed=int(meta["seed"]),
        )
        return cls(cfg, solve=solve)

    def load_entries(self, entries: dict) -> None:
        for name in self.params.names():
            if name not in entries:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            arr = self.params[name]
            if entries[name].shape != arr.shape:
                raise ValueError(f"checkpoint parameter {name!r} has shape {entries[name].shape}, expected {arr.shape}")
            arr[...] = entries[name]


def softmax_cross_entropy(logits: Array, label: int):
    """Returns (loss, dlogits) for one sample."""
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[label]
    p = np.exp(z - lse)
    p[label] -= 1.0
    return float(loss), p


def effective_steps(n_knots: int, mode: str, logsig_step: int, steps_per_knot: int) -> int:
    """Solver steps a sequence of n_knots observations will take end to end."""
    if mode == "nrde":
        import math

        return max(1, math.ceil((n_knots - 1) / logsig_step)) * steps_per_knot
    return max(0, n_knots - 1) * steps_per_knot


def fwp_forward(model: SequenceModel, record) -> Array:
    """Convenience: prepare one record and return its class logits."""
    return model.predict_logits(model.prepare(record))

"""Float64 numeric primitives with hand-written vector-Jacobian products.

Everything is a plain ``numpy`` float64 array. Each primitive comes as a
forward function plus a ``*_vjp`` sibling mapping an upstream cotangent to
cotangents of the inputs. No computation graph is recorded anywhere; callers
compose vjps explicitly in reverse order. Also home to the named parameter
store, the Adam optimizer, and the text checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

Array = np.ndarray

LAYER_NORM_EPS = 1e-5

ACTIVATIONS = ("softmax", "tanh", "sigmoid")


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform; message reports both shapes."""


class DegenerateInputError(ValueError):
    """Input too small/degenerate for the operation (e.g. layer norm of n < 2)."""


class GradAlignmentError(ValueError):
    """Gradient dict does not line up with the parameter store."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# linear map


def apply_linear(w: Array, x: Array, bias: Optional[Array] = None) -> Array:
    """y = W x (+ bias) for W of shape (m, n), x of shape (n,)."""
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"linear map of shape {w.shape} applied to input of shape {x.shape}")
    y = w @ x
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeMismatchError(f"bias of shape {bias.shape} for output of shape {(w.shape[0],)}")
        y = y + bias
    return y


def apply_linear_vjp(w: Array, x: Array, upstream: Array, bias: Optional[Array] = None):
    """Returns (dW, dx, dbias); dbias is None when bias is None."""
    dw = np.outer(upstream, x)
    dx = w.T @ upstream
    dbias = upstream.copy() if bias is not None else None
    return dw, dx, dbias


# ---------------------------------------------------------------------------
# layer normalization (variance denominator n, epsilon inside the sqrt)


def apply_layer_norm(x: Array, gain: Array, shift: Array) -> Array:
    if x.shape[0] < 2:
        raise DegenerateInputError(f"layer norm needs n >= 2, got n = {x.shape[0]}")
    mu = x.mean()
    var = x.var()
    xhat = (x - mu) / np.sqrt(var + LAYER_NORM_EPS)
    return gain * xhat + shift


def apply_layer_norm_vjp(x: Array, gain: Array, shift: Array, upstream: Array):
    """Returns (dx, dgain, dshift)."""
    mu = x.mean()
    var = x.var()
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv
    dgain = upstream * xhat
    dshift = upstream.copy()
    dxhat = upstream * gain
    # standard layer-norm backward: remove mean and the xhat-aligned component
    dx = inv * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())
    return dx, dgain, dshift


# ---------------------------------------------------------------------------
# element-wise / softmax activations


def _softmax_last(x: Array) -> Array:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def apply_activation(kind: str, x: Array) -> Array:
    """softmax (over the last axis), tanh, or sigmoid."""
    if kind == "softmax":
        return _softmax_last(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation kind {kind!r}")


def apply_activation_vjp(kind: str, x: Array, upstream: Array) -> Array:
    if kind == "softmax":
        s = _softmax_last(x)
        return s * (upstream - (upstream * s).sum(axis=-1, keepdims=True))
    if kind == "tanh":
        y = np.tanh(x)
        return upstream * (1.0 - y * y)
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return upstream * s * (1.0 - s)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Ordered name -> float64 array map with deterministic seeded init.

    Iteration order is insertion order; initialization draws from a single
    generator seeded with ``rng_seed``, so identical insertion sequences
    produce identical parameters.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._entries: dict[str, Array] = {}

    def add(self, name: str, value: Array) -> Array:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = as_f64(value).copy()
        self._entries[name] = arr
        return arr

    def add_uniform(self, name: str, shape: tuple, fan_in: int) -> Array:
        bound = float(np.sqrt(1.0 / fan_in))
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def add_zeros(self, name: str, shape) -> Array:
        return self.add(name, np.zeros(shape))

    def add_ones(self, name: str, shape) -> Array:
        return self.add(name, np.ones(shape))

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Array]]:
        return iter(self._entries.items())

    def __getitem__(self, name: str) -> Array:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def size(self) -> int:
        return sum(v.size for v in self._entries.values())

    def flatten(self) -> Array:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def load_flat(self, vec: Array) -> None:
        vec = as_f64(vec)
        if vec.size != self.size():
            raise ShapeMismatchError(f"flat vector of length {vec.size} for store of total size {self.size()}")
        ofs = 0
        for v in self._entries.values():
            v[...] = vec[ofs : ofs + v.size].reshape(v.shape)
            ofs += v.size

    def grads_like(self) -> dict[str, Array]:
        return {k: np.zeros_like(v) for k, v in self._entries.items()}


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        for name, arr in params.items():
            st.m[name] = np.zeros_like(arr)
            st.v[name] = np.zeros_like(arr)
        return st


def adam_update(params: ParamStore, grads: dict, state: AdamState):
    """Standard Adam with bias correction; updates params in place."""
    pnames = set(params.names())
    gnames = set(grads)
    if pnames != gnames:
        missing = sorted(pnames - gnames)
        extra = sorted(gnames - pnames)
        raise GradAlignmentError(f"gradient names misaligned: missing={missing} extra={extra}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient of shape {g.shape} for parameter {name!r} of shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint format: version line, optional meta lines, then per parameter a
# "param <name> <ndim> <dims...>" line followed by %.17g floats. %.17g
# round-trips IEEE doubles bit-exactly.

CHECKPOINT_MAGIC = "ctfwp-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamStore, meta: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        for k, v in (meta or {}).items():
            if any(c.isspace() for c in str(k)):
                raise CheckpointError(f"meta key {k!r} contains whitespace")
            fh.write(f"meta {k} {v}\n")
        for name, arr in params.items():
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"param {name} {arr.ndim}{(' ' + dims) if dims else ''}\n")
            flat = arr.ravel()
            if arr.ndim == 2:
                for row in arr:
                    fh.write(" ".join("%.17g" % x for x in row) + "\n")
            else:
                fh.write(" ".join("%.17g" % x for x in flat) + "\n" if flat.size else "\n")


def load_checkpoint(path):
    """Returns (meta: dict[str, str], entries: dict[str, Array])."""
    meta: dict[str, str] = {}
    entries: dict[str, Array] = {}
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(head[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {head[1]}")
        pending: list[str] = []
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            pending.append(line)
        i = 0
        while i < len(pending):
            parts = pending[i].split()
            if parts[0] == "meta":
                meta[parts[1]] = pending[i].split(None, 2)[2] if len(parts) > 2 else ""
                i += 1
            elif parts[0] == "param":
                name = parts[1]
                ndim = int(parts[2])
                shape = tuple(int(d) for d in parts[3 : 3 + ndim])
                count = int(np.prod(shape)) if shape else 1
                vals: list[float] = []
                i += 1
                while len(vals) < count:
                    if i >= len(pending):
                        raise CheckpointError(f"{path}: truncated data for parameter {name!r}")
                    vals.extend(float(tok) for tok in pending[i].split())
                    i += 1
                if len(vals) != count:
                    raise CheckpointError(f"{path}: wrong value count for parameter {name!r}")
                entries[name] = np.array(vals, dtype=np.float64).reshape(shape)
            else:
                raise CheckpointError(f"{path}: unexpected line {pending[i]!r}")
    return meta, entries

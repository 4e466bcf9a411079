"""Continuous adjoint sensitivity method and its finite-difference oracle.

Gradients of a terminal loss with respect to the initial state and all vector
field parameters are obtained by integrating one augmented ODE backward in
time. The forward state is reconstructed inside the augmented system instead
of checkpointed, so peak memory is one augmented state regardless of how many
solver steps the interval needs.

A field suitable for the adjoint exposes::

    field.state_dim  -> int
    field.n_theta    -> int           # length of the flat parameter cotangent
    field.eval(t, h) -> dh
    field.vjp(t, h, a) -> (f, a_df_dh, a_df_dtheta_flat)

where ``a_df_dh`` is aT @ df/dh and ``a_df_dtheta_flat`` is aT @ df/dtheta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ParamStore
from .solver import SolveConfig, ode_solve

Array = np.ndarray


def backward_adjoint(field, hT: Array, dL_dhT: Array, t0: float, t1: float, cfg: SolveConfig):
    """Integrate the augmented adjoint system from t1 down to t0.

    Returns ``(dL_dh0, dL_dtheta)`` where dL_dtheta is flat in the field's
    parameter order. ``hT`` must be the stored forward state at t1.
    """
    d = field.state_dim
    ntheta = field.n_theta
    z0 = np.concatenate([hT, dL_dhT, np.zeros(ntheta)])

    def aug(t, z):
        h = z[:d]
        a = z[d : 2 * d]
        f, a_df_dh, a_df_dtheta = field.vjp(t, h, a)
        return np.concatenate([f, -a_df_dh, -a_df_dtheta])

    zf = ode_solve(aug, z0, t1, t0, cfg)
    return zf[d : 2 * d].copy(), zf[2 * d :].copy()


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckRow:
    name: str
    analytic_norm: float
    numeric_norm: float
    max_rel: float
    mean_rel: float


@dataclass
class GradCheckReport:
    rows: list
    max_rel: float
    mean_rel: float

    def format_table(self) -> str:
        lines = [f"{'name':<28} {'analytic':>12} {'numeric':>12} {'rel_err':>10}"]
        for r in self.rows:
            lines.append(f"{r.name:<28} {r.analytic_norm:>12.4e} {r.numeric_norm:>12.4e} {r.max_rel:>10.2e}")
        lines.append(f"{'(overall max)':<28} {'':>12} {'':>12} {self.max_rel:>10.2e}")
        return "\n".join(lines)


def _rel_error(a: float, n: float) -> float:
    # absolute fallback when both magnitudes are tiny
    if abs(a) < 1e-8 and abs(n) < 1e-8:
        return abs(a - n)
    return abs(a - n) / max(abs(a), abs(n))


def grad_check_fd(loss_fn, params: ParamStore, analytic: dict, perturbation: float = 1e-4) -> GradCheckReport:
    """Central finite differences per coordinate against analytic gradients.

    ``loss_fn`` takes no arguments and reads the (in-place perturbed) store;
    it must be deterministic, which is verified with two baseline evaluations.
    """
    base_a = float(loss_fn())
    base_b = float(loss_fn())
    if base_a != base_b:
        raise RuntimeError(f"loss is not deterministic: {base_a!r} vs {base_b!r}")

    rows = []
    all_rel = []
    for name, arr in params.items():
        ga = analytic[name]
        flat = arr.ravel()
        ga_flat = np.asarray(ga).ravel()
        gn_flat = np.zeros_like(ga_flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + perturbation
            lp = float(loss_fn())
            flat[i] = orig - perturbation
            lm = float(loss_fn())
            flat[i] = orig
            gn_flat[i] = (lp - lm) / (2.0 * perturbation)
        rels = [_rel_error(a, n) for a, n in zip(ga_flat, gn_flat)]
        all_rel.extend(rels)
        rows.append(
            GradCheckRow(
                name=name,
                analytic_norm=float(np.linalg.norm(ga_flat)),
                numeric_norm=float(np.linalg.norm(gn_flat)),
                max_rel=max(rels) if rels else 0.0,
                mean_rel=float(np.mean(rels)) if rels else 0.0,
            )
        )
    return GradCheckReport(
        rows=rows,
        max_rel=max(all_rel) if all_rel else 0.0,
        mean_rel=float(np.mean(all_rel)) if all_rel else 0.0,
    )

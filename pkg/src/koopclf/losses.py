"""Training losses for the encoder, decoder and CLF.

All loss functions take graph nodes (or arrays, promoted to constants) and
return scalar :class:`~koopclf.autodiff.Var` nodes. :func:`assemble` wires
them together for one epoch over a dataset plus accumulated counterexamples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .controller import SontagTerms, sontag_control
from .falsifier import TAU_A, TAU_SIGMA
from .edmd import BilinearModel, fit_bilinear_lifted


@dataclass
class LossWeights:
    alpha1: float = 0.001
    alpha2: float = 2.0
    alpha3: float = 0.001
    alpha4: float = 1.0
    gamma4: float = 1.0
    roa_hinged: bool = True
    exponential: bool = False
    gamma1: float = 0.01
    gamma2: float = 100.0
    gamma3: float = 0.1

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.gamma4 <= 0:
            raise ValueError("gamma4 must be positive")
        if self.exponential and not (0 < self.gamma1 < self.gamma2 and self.gamma3 > 0):
            raise ValueError("exponential variant needs 0 < gamma1 < gamma2 and gamma3 > 0")


@dataclass
class LossReport:
    recons: float
    dyn: float
    phy: float
    lyap: float
    roa: float
    total: float
    worst: list = field(default_factory=list)  # [(sample index, Lie-derivative margin)]

    @property
    def worst_margin(self) -> float:
        return self.worst[0][1] if self.worst else float("nan")


# ---------------------------------------------------------------------------
# individual terms


def _row_sq(d: ad.Var) -> ad.Var:
    return ad.vsum(ad.mul(d, d), axis=-1)


def loss_recons(x, x_hat) -> ad.Var:
    """Mean of ``||x_k - decode(lift(x_k))||^2``."""
    return ad.mean(_row_sq(ad.sub(x_hat, x)))


def loss_dyn(z, z_next, u, model: BilinearModel) -> ad.Var:
    """Mean one-step residual of the bilinear model in lifted coordinates."""
    z = ad.const(z)
    u = np.asarray(u, dtype=float).reshape(z.shape[0], -1)
    pred = ad.matmul(z, model.K_d.T)
    for i in range(model.m):
        pred = ad.add(pred, ad.mul(u[:, i:i + 1], ad.matmul(z, model.B[i].T)))
    return ad.mean(_row_sq(ad.sub(z_next, pred)))


def blackbox_step(step, x, u, rel_step: float = 1e-6) -> ad.Var:
    """Graph node for ``step(x, u)`` whose backward pass uses a central
    finite-difference Jacobian in ``x`` (first order only)."""
    x = ad.const(x)
    u = np.asarray(u, dtype=float)
    xv = x.value
    out = step(xv, u)
    n = xv.shape[-1]
    J = np.empty(xv.shape + (n,))  # J[..., i, j] = d out_i / d x_j
    for j in range(n):
        h = rel_step * (1.0 + np.abs(xv[..., j]))
        e = np.zeros_like(xv)
        e[..., j] = h
        J[..., :, j] = (step(xv + e, u) - step(xv - e, u)) / (2.0 * h[..., None])

    def vjp(g):
        return (ad.Var(np.einsum("...i,...ij->...j", g.value, J), op="blackbox_vjp"),)

    return ad._node(out, (x,), vjp, "blackbox")


def loss_phy(x_hat, x_hat_next, u, step) -> ad.Var:
    """Mean of ``||decode(lift(x_{k+1})) - h(decode(lift(x_k)), u_k)||^2``."""
    pred = blackbox_step(step, x_hat, u)
    return ad.mean(_row_sq(ad.sub(x_hat_next, pred)))


def lie_derivative(g, z, model: BilinearModel, u) -> ad.Var:
    """Model Lie derivative ``dV/dz K z + sum_i u_i dV/dz Q_i z`` per row."""
    g, z = ad.const(g), ad.const(z)
    u = np.asarray(u, dtype=float).reshape(z.shape[0], -1)
    lie = ad.vsum(ad.mul(g, ad.matmul(z, model.K.T)), axis=1)
    for i in range(model.m):
        ci = ad.vsum(ad.mul(g, ad.matmul(z, model.Q[i].T)), axis=1)
        lie = ad.add(lie, ad.mul(u[:, i], ci))
    return lie


def sontag_lie(g, z, model: BilinearModel, U_lo, U_hi, clip: bool = True,
               tau_sigma: float = TAU_SIGMA) -> ad.Var:
    """Lie derivative under the (clipped) Sontag input, differentiable through the input.

    Where ``sigma > tau_sigma`` an unclipped input coordinate is
    ``-c_i (a + sqrt(a^2 + sigma^2)) / sigma`` inside the graph; a clipped one
    is the constant bound. Elsewhere the input is zero.
    """
    g, z = ad.const(g), ad.const(z)
    a = ad.vsum(ad.mul(g, ad.matmul(z, model.K.T)), axis=1)
    cs = [ad.vsum(ad.mul(g, ad.matmul(z, model.Q[i].T)), axis=1) for i in range(model.m)]
    if not cs:
        return a
    c_val = np.stack([c.value for c in cs], axis=1)
    sigma_val = np.sum(c_val * c_val, axis=1)
    live = sigma_val > tau_sigma
    u_raw = sontag_control(SontagTerms(a.value, c_val, np.zeros_like(a.value)), tau_sigma)
    u_clip = np.clip(u_raw, U_lo, U_hi) if clip else u_raw
    held = u_clip != u_raw
    # placeholders keep sqrt and 1/sigma finite on rows where the input is off
    pad = np.where(live, 0.0, 1.0)
    sigma = cs[0] * cs[0]
    for c in cs[1:]:
        sigma = sigma + c * c
    root = ad.sqrt(a * a + sigma * sigma + pad)
    scale = (a + root) * (2.0 * ad.recip_half(sigma + pad))
    lie = a
    for i, c in enumerate(cs):
        free = np.where(live & ~held[:, i], 1.0, 0.0)
        fixed = np.where(live & held[:, i], u_clip[:, i], 0.0)
        u_i = ad.neg(c * scale) * free + fixed
        lie = lie + c * u_i
    return lie


def sontag_terms_var(g, z, model: BilinearModel):
    """Numeric ``(a, c)`` from graph values (used to pick the input)."""
    gv, zv = ad.const(g).value, ad.const(z).value
    a = np.einsum("bi,ij,bj->b", gv, model.K, zv)
    c = np.einsum("bi,kij,bj->bk", gv, model.Q, zv)
    return a, c


def loss_lyap(V, lie, V0) -> ad.Var:
    """Mean of ``max(0, -V) + max(0, Vdot) + V(0)^2``."""
    V, lie, V0 = ad.const(V), ad.const(lie), ad.const(V0)
    per = ad.add(ad.relu(ad.neg(V)), ad.relu(lie))
    return ad.add(ad.mean(per), ad.vsum(ad.mul(V0, V0)))


def loss_lyap_exponential(V, lie, z, V0, gamma1: float, gamma2: float, gamma3: float) -> ad.Var:
    if not gamma1 < gamma2:
        raise ValueError("need gamma1 < gamma2")
    V, lie, z, V0 = ad.const(V), ad.const(lie), ad.const(z), ad.const(V0)
    zz = _row_sq(z)
    per = ad.add(ad.relu(ad.sub(ad.mul(gamma1, zz), V)), ad.relu(ad.sub(V, ad.mul(gamma2, zz))))
    per = ad.add(per, ad.relu(ad.add(lie, ad.mul(gamma3, V))))
    return ad.add(ad.mean(per), ad.vsum(ad.mul(V0, V0)))


def loss_roa(z, V, gamma4: float, hinged: bool = True) -> ad.Var:
    """Mean of ``max(0, ||z|| - gamma4 V)`` (hinged) or of ``||z|| - gamma4 V``."""
    z, V = ad.const(z), ad.const(V)
    d = ad.sub(ad.norm_rows(z), ad.mul(gamma4, V))
    return ad.mean(ad.relu(d) if hinged else d)


def total_loss(parts: dict, weights: LossWeights) -> ad.Var:
    """``a1 recons + a2 dyn + a3 phy + a4 lyap + roa``."""
    terms = [ad.mul(weights.alpha1, parts["recons"]), ad.mul(weights.alpha2, parts["dyn"]),
             ad.mul(weights.alpha3, parts["phy"]), ad.mul(weights.alpha4, parts["lyap"]),
             ad.const(parts["roa"])]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ---------------------------------------------------------------------------
# one epoch's objective


@dataclass
class TrainingBatch:
    states: np.ndarray
    inputs: np.ndarray  # (N_d - 1, m), NaN where no transition
    cex: np.ndarray  # (k, n) counterexample states
    U_lo: np.ndarray
    U_hi: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, U, cex=None) -> "TrainingBatch":
        n = dataset.states.shape[1]
        cex = np.zeros((0, n)) if cex is None or len(cex) == 0 else np.asarray(cex, dtype=float)
        return cls(dataset.states, dataset.inputs, cex, U.lo, U.hi)

    @property
    def pair_index(self) -> np.ndarray:
        return np.flatnonzero(np.all(np.isfinite(self.inputs), axis=1))


def choose_training_input(a, c, recorded, mode: str, U_lo, U_hi, clip: bool,
                          tau_sigma: float = TAU_SIGMA) -> np.ndarray:
    """Input used inside the Lyapunov risk.

    ``sontag``: the Sontag law at the sample (clipped to ``U`` if ``clip``),
    zero where ``sigma <= tau_sigma``.
    ``dataset``: the recorded input where one exists, otherwise the minimizer
    of ``c . u`` over the input box.
    """
    if mode == "sontag":
        u = sontag_control(SontagTerms(a, c, np.zeros_like(a)), tau_sigma)
        return np.clip(u, U_lo, U_hi) if clip else u
    if mode == "dataset":
        worst = np.where(c > 0, U_lo, U_hi)
        rec = np.asarray(recorded, dtype=float)
        return np.where(np.isfinite(rec), rec, worst)
    raise ValueError(f"unknown input mode {mode!r}")


def assemble(bundle, theta: ad.Var, batch: TrainingBatch, model: BilinearModel | None,
             weights: LossWeights, step=None, T: float | None = None, u_mode: str = "sontag",
             clip_u: bool = True, refit: bool = False, ridge: float = 0.0):
    """Build the total loss graph.

    When ``refit`` is set (or no model is given) the bilinear matrices are
    re-identified from the current lift before the losses are formed; they
    then enter the graph as constants.

    Returns ``(total, report, model, parts)``.
    """
    states = batch.states
    Nd = states.shape[0]
    X_all = np.vstack([states, batch.cex]) if len(batch.cex) else states
    z_all = bundle.lift_var(theta, X_all)
    pairs = batch.pair_index
    z_states = ad.take_axis(z_all, 0, 0, Nd)
    z_k = ad.take_rows(z_states, pairs)
    z_k1 = ad.take_rows(z_states, pairs + 1)
    u_k = batch.inputs[pairs]

    if refit or model is None:
        model = fit_bilinear_lifted(z_k.value, u_k, z_k1.value, T if T is not None else model.T, ridge)

    x_hat = bundle.decode_var(theta, z_states)
    parts = {"recons": loss_recons(states, x_hat), "dyn": loss_dyn(z_k, z_k1, u_k, model)}
    if step is not None and weights.alpha3 > 0:
        parts["phy"] = loss_phy(ad.take_rows(x_hat, pairs), ad.take_rows(x_hat, pairs + 1), u_k, step)
    else:
        parts["phy"] = ad.Var(0.0)

    V, g = bundle.V_grad_var(theta, z_all)
    V0 = bundle.V_var(theta, np.zeros((1, bundle.N)))
    a, c = sontag_terms_var(g, z_all, model)
    m = model.m
    recorded = np.full((z_all.shape[0], m), np.nan)
    recorded[:Nd - 1] = batch.inputs
    if u_mode == "sontag":
        lie = sontag_lie(g, z_all, model, batch.U_lo, batch.U_hi, clip_u)
        # where the input has no authority the falsifier asks for a < -tau_a
        no_authority = np.sum(c * c, axis=1) <= TAU_SIGMA
        lie = ad.add(lie, np.where(no_authority, TAU_A, 0.0))
    else:
        u_lyap = choose_training_input(a, c, recorded, u_mode, batch.U_lo, batch.U_hi, clip_u)
        lie = lie_derivative(g, z_all, model, u_lyap)
    if weights.exponential:
        parts["lyap"] = loss_lyap_exponential(V, lie, z_all, V0, weights.gamma1, weights.gamma2,
                                              weights.gamma3)
    else:
        parts["lyap"] = loss_lyap(V, lie, V0)
    parts["roa"] = loss_roa(z_all, V, weights.gamma4, weights.roa_hinged)
    total = total_loss(parts, weights)

    order = np.argsort(-lie.value, kind="stable")[:5]
    worst = [(int(i), float(lie.value[i])) for i in order]
    report = LossReport(*(float(parts[k].value) for k in ("recons", "dyn", "phy", "lyap", "roa")),
                        float(total.value), worst)
    return total, report, model, parts

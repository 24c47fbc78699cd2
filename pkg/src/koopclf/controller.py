"""Sontag universal feedback from a learned CLF and bilinear model.

The CLF enters as a callable ``clf(z) -> (V, dV/dz)`` so the same code runs
on a trained :class:`~koopclf.nets.NetworkBundle` (``bundle.V_grad``) or an
analytic test function.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import IntegrationDiverged, Plant, rk4_step

log = logging.getLogger(__name__)

SIGMA_TOL = 1e-9


@dataclass
class SontagTerms:
    a: np.ndarray  # dV/dz . K z
    c: np.ndarray  # (..., m), dV/dz . Q_i z
    V: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.sum(self.c * self.c, axis=-1)


def sontag_terms(clf, model, z) -> SontagTerms:
    z = np.asarray(z, dtype=float)
    V, g = clf(z)
    a = np.einsum("...i,ij,...j->...", g, model.K, z)
    c = np.einsum("...i,kij,...j->...k", g, model.Q, z)
    return SontagTerms(np.asarray(a), np.asarray(c), np.asarray(V))


def sontag_control(terms: SontagTerms, tau: float = SIGMA_TOL) -> np.ndarray:
    """``u_i = -c_i (a + sqrt(a^2 + sigma^2)) / sigma`` where ``sigma > tau``, else 0."""
    a = np.asarray(terms.a, dtype=float)
    c = np.asarray(terms.c, dtype=float)
    sigma = np.sum(c * c, axis=-1)
    live = sigma > tau
    safe = np.where(live, sigma, 1.0)
    scale = np.where(live, (a + np.hypot(a, sigma)) / safe, 0.0)
    return -c * scale[..., None]


def closed_loop_lie(terms: SontagTerms, u) -> np.ndarray:
    """Model Lie derivative ``a + c . u`` of the CLF under input ``u``."""
    return terms.a + np.sum(terms.c * u, axis=-1)


@dataclass
class StepInfo:
    V: float
    a: float
    sigma: float
    lie: float
    u_raw: np.ndarray
    clipped: bool


def closed_loop_step(plant: Plant, lift, clf, model, x, clip: bool = True):
    """Apply the Sontag input at state ``x`` for one sampling period.

    Returns ``(u, x_next, info)``; ``info.lie`` is the model Lie derivative
    under the applied (possibly clipped) input.
    """
    x = np.asarray(x, dtype=float)
    z = lift(x)
    terms = sontag_terms(clf, model, z)
    u_raw = sontag_control(terms)
    u = plant.U.clip(u_raw) if clip else u_raw
    clipped = bool(np.any(u != u_raw))
    if clipped:
        log.debug("input clipped from %s to %s", u_raw, u)
    x_next = rk4_step(plant, x, u, plant.T)
    info = StepInfo(float(terms.V), float(terms.a), float(terms.sigma),
                    float(closed_loop_lie(terms, u)), u_raw, clipped)
    return u, x_next, info


@dataclass
class Rollout:
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    V: np.ndarray
    a: np.ndarray
    sigma: np.ndarray
    status: str  # converged | horizon | diverged
    clip_events: int = 0
    exited_domain: bool = False

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.x[-1]))

    def to_csv(self, path) -> None:
        n, m = self.x.shape[1], self.u.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)]
                       + ["V", "a", "sigma"])
            for k in range(len(self.t)):
                uk = self.u[k] if k < len(self.u) else [np.nan] * m
                row = [self.t[k], *self.x[k], *uk, self.V[k], self.a[k], self.sigma[k]]
                w.writerow(["" if (isinstance(v, float) and np.isnan(v)) else repr(float(v)) for v in row])


def rollout(plant: Plant, lift, clf, model, x0, horizon: int | None = None,
            stop_tol: float | None = None, controlled: bool = True, clip: bool = True,
            stop_on_exit: bool = False) -> Rollout:
    """Closed-loop (or zero-input) simulation of the true plant from ``x0``.

    Stops when ``||x|| < stop_tol``, after ``horizon`` steps, or when the state
    leaves ``10x`` the domain width (status ``diverged``). For an uncontrolled
    run ``lift``, ``clf`` and ``model`` may be ``None``; the lifted columns are
    then NaN.
    """
    if controlled and (lift is None or clf is None or model is None):
        raise ValueError("a controlled rollout needs lift, clf and model")
    blind = lift is None or clf is None or model is None
    width = float(np.max(plant.X.width))
    stop_tol = 1e-2 * width if stop_tol is None else stop_tol
    horizon = int(round(10.0 / plant.T)) if horizon is None else horizon
    x = np.asarray(x0, dtype=float)
    xs, zs, us, Vs, As, Ss = [x], [], [], [], [], []
    status, clips, exited = "horizon", 0, False
    zero = np.zeros(plant.m)

    def record(x):
        if blind:
            zs.append(np.full(0, np.nan))
            Vs.append(np.nan), As.append(np.nan), Ss.append(np.nan)
            return None
        z = lift(x)
        terms = sontag_terms(clf, model, z)
        zs.append(z)
        Vs.append(float(terms.V))
        As.append(float(terms.a))
        Ss.append(float(terms.sigma))
        return terms

    for k in range(horizon + 1):
        terms = record(x)
        if np.linalg.norm(x) < stop_tol:
            status = "converged"
            break
        if k == horizon:
            break
        if controlled:
            u_raw = sontag_control(terms)
            u = plant.U.clip(u_raw) if clip else u_raw
            clips += int(np.any(u != u_raw))
        else:
            u = zero
        try:
            x = rk4_step(plant, x, u, plant.T)
        except IntegrationDiverged:
            status = "diverged"
            us.append(u)
            break
        us.append(u)
        xs.append(x)
        if not plant.X.contains(x):
            exited = True
            if stop_on_exit:
                break
        if np.linalg.norm(x) > 10.0 * width:
            status = "diverged"
            record(x)
            break
    t = plant.T * np.arange(len(xs))
    u_arr = np.array(us).reshape(-1, plant.m)
    return Rollout(t, np.array(xs), np.array(zs), u_arr, np.array(Vs), np.array(As),
                   np.array(Ss), status, clips, exited)


@dataclass
class RolloutSummary:
    rollouts: list = field(default_factory=list)
    x0: np.ndarray = None

    @property
    def n_converged(self) -> int:
        return sum(r.converged for r in self.rollouts)

    def rows(self):
        for i, r in enumerate(self.rollouts):
            yield {"index": i, "status": r.status, "converged": int(r.converged),
                   "steps": len(r.u), "t_end": float(r.t[-1]), "final_norm": r.final_norm,
                   "clip_events": r.clip_events, "exited_domain": int(r.exited_domain)}

    def to_csv(self, path) -> None:
        fields = ["index", "status", "converged", "steps", "t_end", "final_norm", "clip_events",
                  "exited_domain"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_rollouts(plant: Plant, lift, clf, model, x0s, **kwargs) -> RolloutSummary:
    x0s = np.asarray(x0s, dtype=float).reshape(-1, plant.n)
    return RolloutSummary([rollout(plant, lift, clf, model, x0, **kwargs) for x0 in x0s], x0s)


def write_phase_csv(summary: RolloutSummary, path) -> None:
    """One long table ``rollout, t, x_1..x_n, u_1..u_m`` for phase portraits."""
    if not summary.rollouts:
        Path(path).write_text("rollout,t\n")
        return
    n = summary.rollouts[0].x.shape[1]
    m = summary.rollouts[0].u.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout", "t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)])
        for i, r in enumerate(summary.rollouts):
            for k in range(len(r.t)):
                uk = r.u[k] if k < len(r.u) else [""] * m
                w.writerow([i, repr(float(r.t[k]))] + [repr(float(v)) for v in r.x[k]]
                           + [v if v == "" else repr(float(v)) for v in uk])

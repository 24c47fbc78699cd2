"""Interval branch-and-bound falsifier for the CLF conditions.

The search runs over boxes in state space. Each box is pushed through the
encoder, the CLF and its gradient with interval arithmetic. A box is closed
when its lifted image lies inside the excluded ball ``sum z_i^2 < eps`` or when
every clause has a negative upper bound. Otherwise its center (and, once the
box is narrower than ``delta``, its corners) are checked in plain arithmetic
for a counterexample and the box is bisected along its widest coordinate.

Clauses (violated when the margin is positive):

``decrease``
    Sontag mode: ``sigma <= tau_sigma`` and ``a >= -tau_a``. Margin
    ``a + tau_a`` where ``sigma <= tau_sigma``, else ``tau_sigma - sigma``.
    Dataset mode: ``min over u in U of a + c.u >= 0``.
    Exponential variant: ``lie + gamma3 V >= 0`` with the Sontag closed-loop
    ``lie``.
``positivity``
    ``V <= 0`` (only for CLF parameterizations not positive by construction).
``exp_lower`` / ``exp_upper``
    ``V < gamma1 |z|^2`` and ``V > gamma2 |z|^2`` (exponential variant).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .intervals import Interval, isqrt
from .nets import MlpSpec, QuadraticClfSpec, forward
from .sim import Box

log = logging.getLogger(__name__)

TAU_SIGMA = 1e-6
TAU_A = 1e-6
EPS_FLOOR = 1e-8

UNSAT, SAT, BUDGET = "UNSAT", "SAT", "BUDGET"


class FalsifierSoundnessError(RuntimeError):
    """A reported counterexample does not violate its clause on re-evaluation."""


# ---------------------------------------------------------------------------
# systems: what the falsifier evaluates


class NetworkSystem:
    """Encoder + CLF from a :class:`~koopclf.nets.NetworkBundle`."""

    def __init__(self, bundle, theta=None):
        self.bundle = bundle
        self.theta = bundle.theta if theta is None else np.asarray(theta, dtype=float)
        self.enc_layers = bundle.encoder.unpack(bundle.part("encoder", self.theta))
        self.clf_params = bundle.part("clf", self.theta)
        self.phi0 = forward(bundle.encoder, bundle.part("encoder", self.theta),
                            np.zeros(bundle.encoder.n_in))

    @property
    def positive_definite(self) -> bool:
        return isinstance(self.bundle.clf, QuadraticClfSpec)

    def point(self, x):
        z = self.bundle.lift(x, self.theta)
        V, g = self.bundle.V_grad(z, self.theta)
        return z, V, g

    def enclose(self, lo, hi):
        enc = self.bundle.encoder
        ylo, yhi, Jlo, Jhi = kernels.interval_mlp(lo, hi, self.enc_layers, enc.final_linear)
        zc = self.bundle.lift(0.5 * (lo + hi), self.theta)
        n = lo.shape[1]
        if self.bundle.state_inclusive:
            Phi = _mean_value(Interval(ylo, yhi) - self.phi0, zc[:, n:], Jlo, Jhi, 0.5 * (hi - lo))
            Z = Interval(np.concatenate([lo, Phi.lo], axis=1), np.concatenate([hi, Phi.hi], axis=1))
        else:
            Z = _mean_value(Interval(ylo, yhi) - self.phi0, zc, Jlo, Jhi, 0.5 * (hi - lo))
        V, G = _clf_enclosure(self.bundle.clf, self.clf_params, Z)
        return Z, V, G


class QuadraticLiftSystem:
    """Identity lift ``z = x`` with ``V = z^T P z``; used for analytic instances."""

    positive_definite = True

    def __init__(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        self.P = 0.5 * (P + P.T)

    def point(self, x):
        z = np.asarray(x, dtype=float)
        Pz = z @ self.P
        return z, np.sum(z * Pz, axis=-1), 2.0 * Pz

    def enclose(self, lo, hi):
        Z = Interval(lo, hi)
        PZ = Z @ self.P
        return Z, (Z * PZ).sum(-1), 2.0 * PZ


def _mean_value(natural: Interval, center_val, Jlo, Jhi, rad) -> Interval:
    """Intersect a natural enclosure with ``f(c) + J [x - c]``."""
    Jabs = np.maximum(np.abs(Jlo), np.abs(Jhi))
    spread = np.einsum("bij,bj->bi", Jabs, rad)
    spread = spread * (1.0 + 1e-14) + 1e-14 * np.abs(center_val) + 1e-300
    return natural.intersect(Interval(center_val - spread, center_val + spread))


def _clf_enclosure(clf, params, Z: Interval):
    if isinstance(clf, QuadraticClfSpec):
        net = clf.net
        layers = net.unpack(params)
        wlo, whi, dlo, dhi = kernels.interval_mlp(Z.lo, Z.hi, layers, net.final_linear)
        wc = forward(net, params, Z.mid)
        Wf = _mean_value(Interval(wlo, whi), wc, dlo, dhi, Z.rad)
        B = Z.shape[0]
        Wm = Interval(Wf.lo.reshape(B, clf.n_w, clf.N), Wf.hi.reshape(B, clf.n_w, clf.N))
        dW = Interval(dlo.reshape(B, clf.n_w, clf.N, clf.N), dhi.reshape(B, clf.n_w, clf.N, clf.N))
        Wz = (Wm * Z[:, None, :]).sum(-1)
        Jwz = Wm + (dW * Z[:, None, :, None]).sum(2)
        V = clf.gamma * Z.square().sum(-1) + Wz.square().sum(-1)
        G = (2.0 * clf.gamma) * Z + 2.0 * (Jwz * Wz[:, :, None]).sum(1)
        return V, G
    if isinstance(clf, MlpSpec):
        layers = clf.unpack(params)
        ylo, yhi, Jlo, Jhi = kernels.interval_mlp(Z.lo, Z.hi, layers, clf.final_linear)
        yc = forward(clf, params, Z.mid)
        Y = _mean_value(Interval(ylo, yhi), yc, Jlo, Jhi, Z.rad)
        return Y[:, 0], Interval(Jlo[:, 0, :], Jhi[:, 0, :])
    raise TypeError(f"unsupported CLF spec {type(clf).__name__}")


# ---------------------------------------------------------------------------
# query, results, certificate


@dataclass
class FalsifierQuery:
    domain: Box
    epsilon: float
    delta: np.ndarray | float | None = None  # default 1e-3 * domain width
    budget: int = 1_000_000
    mode: str = "sontag"  # or "dataset" (check for all u in U)
    U: Box | None = None
    exponential: bool = False
    gamma1: float = 0.01
    gamma2: float = 100.0
    gamma3: float = 0.1
    tau_sigma: float = TAU_SIGMA
    tau_a: float = TAU_A
    batch: int = 128
    max_counterexamples: int = 16
    extra_batches: int = 8  # keep searching this long after the first counterexample

    def __post_init__(self):
        width = self.domain.width
        d = 1e-3 * width if self.delta is None else np.broadcast_to(np.asarray(self.delta, float), width.shape)
        self.delta = np.array(d, dtype=float)
        if np.any(self.delta <= 0):
            raise ValueError("delta must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.mode not in ("sontag", "dataset"):
            raise ValueError(f"unknown falsifier mode {self.mode!r}")
        if self.mode == "dataset" and self.U is None:
            raise ValueError("dataset mode needs the input box U")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")

    def clauses(self, system) -> tuple:
        out = ["decrease"]
        if not system.positive_definite:
            out.append("positivity")
        if self.exponential:
            out += ["exp_lower", "exp_upper"]
        return tuple(out)


@dataclass
class Counterexample:
    x: np.ndarray
    z: np.ndarray
    clause: str
    margin: float
    box_id: int = -1

    def fields(self) -> dict:
        return {"cex_clause": self.clause, "cex_margin": repr(float(self.margin)),
                "cex_box_id": str(self.box_id),
                "cex_x": " ".join(repr(float(v)) for v in self.x),
                "cex_z": " ".join(repr(float(v)) for v in self.z)}


@dataclass
class FalsifierResult:
    outcome: str
    epsilon: float
    delta: np.ndarray
    boxes_processed: int
    splits: int
    delta_closed: int
    wall_time: float
    counterexamples: list = field(default_factory=list)
    suspicious_box: tuple | None = None  # (lo, hi, upper bound) on BUDGET

    @property
    def counterexample(self) -> Counterexample | None:
        return self.counterexamples[0] if self.counterexamples else None

    def certificate(self) -> "Certificate":
        return Certificate.from_result(self)


@dataclass
class Certificate:
    """Plain-text ``key = value`` verification record.

    Wall time is kept on the object but not written by default so that
    repeated runs produce identical files.
    """

    outcome: str
    epsilon: float
    delta: np.ndarray
    boxes_processed: int
    splits: int
    delta_closed: int
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, res: FalsifierResult) -> "Certificate":
        extra = {}
        if res.counterexample is not None:
            extra.update(res.counterexample.fields())
        if res.suspicious_box is not None:
            lo, hi, ub = res.suspicious_box
            extra["suspicious_lo"] = " ".join(repr(float(v)) for v in lo)
            extra["suspicious_hi"] = " ".join(repr(float(v)) for v in hi)
            extra["suspicious_upper_bound"] = repr(float(ub))
        return cls(res.outcome, res.epsilon, res.delta, res.boxes_processed, res.splits,
                   res.delta_closed, res.wall_time, extra)

    def to_text(self, include_timing: bool = False) -> str:
        rows = [("outcome", self.outcome), ("epsilon", repr(float(self.epsilon))),
                ("delta", " ".join(repr(float(v)) for v in np.atleast_1d(self.delta))),
                ("boxes_processed", str(self.boxes_processed)), ("splits", str(self.splits)),
                ("delta_closed", str(self.delta_closed))]
        if include_timing:
            rows.append(("wall_time", f"{self.wall_time:.3f}"))
        rows += sorted(self.extra.items())
        return "".join(f"{k} = {v}\n" for k, v in rows)

    def write(self, path, include_timing: bool = False) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text(include_timing))

    @classmethod
    def read(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls.from_text(fh.read(), str(path))

    @classmethod
    def from_text(cls, text: str, source: str = "<certificate>") -> "Certificate":
        kv = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        try:
            cert = cls(kv.pop("outcome"), float(kv.pop("epsilon")),
                       np.array([float(v) for v in kv.pop("delta").split()]),
                       int(kv.pop("boxes_processed")), int(kv.pop("splits")),
                       int(kv.pop("delta_closed")))
        except KeyError as e:
            raise ValueError(f"{source}: certificate lacks field {e.args[0]}") from None
        if "wall_time" in kv:
            cert.wall_time = float(kv.pop("wall_time"))
        cert.extra = kv
        return cert


# ---------------------------------------------------------------------------
# epsilon


def choose_epsilon(extent: float, data_min_norms, factor: float = 1e-3) -> float:
    """``factor * min{1, extent, min norms}``, floored at ``1e-8``."""
    terms = [1.0, float(extent), *np.atleast_1d(np.asarray(data_min_norms, dtype=float))]
    eps = factor * min(terms)
    return eps if eps > 0 and np.isfinite(eps) else EPS_FLOOR


def boundary_points(domain: Box, per_edge: int = 9) -> np.ndarray:
    """Deterministic points on the faces of a box (corners, face grids)."""
    n = domain.dim
    axes = [np.linspace(domain.lo[i], domain.hi[i], per_edge) for i in range(n)]
    pts = []
    for i in range(n):
        for side in (domain.lo[i], domain.hi[i]):
            grids = [axes[j] if j != i else np.array([side]) for j in range(n)]
            mesh = np.meshgrid(*grids, indexing="ij")
            pts.append(np.stack([g.ravel() for g in mesh], axis=-1))
    return np.unique(np.vstack(pts), axis=0)


def estimate_epsilon(lift, domain: Box, factor: float = 1e-3, per_edge: int = 9) -> float:
    """Apply :func:`choose_epsilon` with extents measured on the domain.

    The lifted extent is the diameter of the bounding box of ``lift`` over a
    grid of the domain. The minimum norms are those of the state and of its
    lift over the domain boundary, which is where the excluded ball must end.
    """
    n = domain.dim
    k = max(3, min(per_edge, int(round(4096 ** (1.0 / n)))))
    axes = [np.linspace(domain.lo[i], domain.hi[i], k) for i in range(n)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    zg = lift(grid)
    extent = float(np.linalg.norm(zg.max(axis=0) - zg.min(axis=0)))
    bnd = boundary_points(domain, min(per_edge, k))
    zb = lift(bnd)
    mins = [float(np.min(np.sum(bnd * bnd, axis=-1))), float(np.min(np.sum(zb * zb, axis=-1)))]
    return choose_epsilon(extent, mins, factor)


# ---------------------------------------------------------------------------
# clause evaluation


def point_terms(system, model, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z, V, g = system.point(x)
    a = np.einsum("bi,ij,bj->b", g, model.K, z)
    c = np.einsum("bi,kij,bj->bk", g, model.Q, z)
    return z, np.asarray(V).reshape(-1), a, c


def clause_margins(system, model, query: FalsifierQuery, x) -> dict:
    """Plain-arithmetic violation margins per clause at states ``x``."""
    z, V, a, c = point_terms(system, model, x)
    sigma = np.sum(c * c, axis=-1)
    zz = np.sum(z * z, axis=-1)
    out = {}
    if query.mode == "dataset":
        inf_cu = np.sum(np.minimum(c * query.U.lo, c * query.U.hi), axis=-1)
        lie = a + inf_cu
        out["decrease"] = lie + query.gamma3 * V if query.exponential else lie
    elif query.exponential:
        lie = np.where(sigma <= query.tau_sigma, a + query.tau_a, -np.hypot(a, sigma))
        out["decrease"] = lie + query.gamma3 * V
    else:
        out["decrease"] = np.where(sigma <= query.tau_sigma, a + query.tau_a, query.tau_sigma - sigma)
    clauses = query.clauses(system)
    if "positivity" in clauses:
        out["positivity"] = -V
    if "exp_lower" in clauses:
        out["exp_lower"] = query.gamma1 * zz - V
        out["exp_upper"] = V - query.gamma2 * zz
    return out, zz, z


def _clause_upper_bounds(system, model, query: FalsifierQuery, Z, V, G):
    """Upper bounds on each clause margin over a batch of boxes."""
    KZ = Z @ model.K.T
    A = (G * KZ).sum(-1)
    C = [(G * (Z @ Qi.T)).sum(-1) for Qi in model.Q]
    ub = {}
    if query.mode == "dataset":
        lie_hi = A.hi.copy()
        for i, Ci in enumerate(C):
            ulo, uhi = query.U.lo[i], query.U.hi[i]
            # sup over c in Ci of min(c ulo, c uhi), enclosed by endpoint evaluation
            lie_hi = lie_hi + np.maximum(np.minimum(Ci.lo * ulo, Ci.lo * uhi),
                                         np.minimum(Ci.hi * ulo, Ci.hi * uhi))
        lie_hi = lie_hi * (1 + 1e-14) + 1e-14 * np.abs(lie_hi) + 1e-300
        ub["decrease"] = lie_hi + query.gamma3 * V.hi if query.exponential else lie_hi
    else:
        S = Interval(np.zeros(Z.shape[0]))
        for Ci in C:
            S = S + Ci.square()
        maybe_small = S.lo <= query.tau_sigma
        if query.exponential:
            branch_a = (A + query.gamma3 * V).hi + query.tau_a
            big = Interval(np.maximum(S.lo, query.tau_sigma), np.maximum(S.hi, query.tau_sigma))
            root = isqrt(A.square() + big.square())
            branch_b = (query.gamma3 * V - root).hi
            maybe_big = S.hi > query.tau_sigma
            ub["decrease"] = np.maximum(np.where(maybe_small, branch_a, -np.inf),
                                        np.where(maybe_big, branch_b, -np.inf))
        else:
            ub["decrease"] = np.where(maybe_small, A.hi + query.tau_a, query.tau_sigma - S.lo)
    clauses = query.clauses(system)
    if "positivity" in clauses:
        ub["positivity"] = -V.lo
    if "exp_lower" in clauses:
        ZZ = Z.square().sum(-1)
        ub["exp_lower"] = (query.gamma1 * ZZ - V).hi
        ub["exp_upper"] = (V - query.gamma2 * ZZ).hi
    return ub


# ---------------------------------------------------------------------------
# branch and bound


def _corners(lo, hi):
    n = lo.shape[-1]
    bits = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    return lo[:, None, :] + bits[None] * (hi - lo)[:, None, :]


def _candidates(system, model, query, X, box_ids):
    """Counterexamples among points ``X`` (rows) tagged with ``box_ids``."""
    if len(X) == 0:
        return []
    margins, zz, z = clause_margins(system, model, query, X)
    names = list(margins)
    M = np.stack([margins[k] for k in names], axis=-1)
    best = np.argmax(M, axis=-1)
    top = M[np.arange(len(X)), best]
    ok = (top > 0) & (zz >= query.epsilon) & np.all(np.isfinite(M), axis=-1)
    return [Counterexample(X[i].copy(), z[i].copy(), names[best[i]], float(top[i]), int(box_ids[i]))
            for i in np.flatnonzero(ok)]


def falsify(query: FalsifierQuery, system, model) -> FalsifierResult:
    """Search the domain for a CLF violation or prove there is none at resolution ``delta``."""
    t0 = time.perf_counter()
    dom = query.domain
    scale = np.where(dom.width > 0, dom.width, 1.0)
    counter = itertools.count()
    heap = [(-np.inf, next(counter), dom.lo.copy(), dom.hi.copy())]
    processed = splits = delta_closed = 0
    found = []
    extra = -1  # batches still allowed after the first counterexample

    def finish(outcome, suspicious=None):
        found.sort(key=lambda c: (-c.margin, c.box_id))
        return FalsifierResult(outcome, query.epsilon, query.delta, processed, splits, delta_closed,
                               time.perf_counter() - t0, found[:query.max_counterexamples], suspicious)

    while heap:
        if found:
            if extra <= 0 or len(found) >= query.max_counterexamples:
                break
            extra -= 1
        batch = [heapq.heappop(heap) for _ in range(min(query.batch, len(heap)))]
        ids = np.array([b[1] for b in batch])
        lo = np.array([b[2] for b in batch])
        hi = np.array([b[3] for b in batch])
        processed += len(batch)
        with np.errstate(over="ignore", invalid="ignore"):
            Z, V, G = system.enclose(lo, hi)
            ubs = _clause_upper_bounds(system, model, query, Z, V, G)
        ub = np.max(np.stack(list(ubs.values())), axis=0)
        ub = np.where(np.isfinite(ub), ub, np.inf)
        zsq_hi = Z.square().sum(-1).hi
        open_ = ~((zsq_hi < query.epsilon) | (ub < 0))
        if not np.any(open_):
            continue
        lo, hi, ids, ub = lo[open_], hi[open_], ids[open_], ub[open_]
        found += _candidates(system, model, query, 0.5 * (lo + hi), ids)
        small = np.all((hi - lo) <= query.delta, axis=-1)
        if np.any(small):
            corners = _corners(lo[small], hi[small])
            k = corners.shape[1]
            found += _candidates(system, model, query, corners.reshape(-1, lo.shape[1]),
                                 np.repeat(ids[small], k))
            delta_closed += int(small.sum())
        if found and extra < 0:
            extra = query.extra_batches
        for i in np.flatnonzero(~small):
            if splits >= query.budget:
                box = (lo[i], hi[i], ub[i])
                if heap and -heap[0][0] > ub[i]:
                    box = (heap[0][2], heap[0][3], -heap[0][0])
                return finish(SAT if found else BUDGET, None if found else box)
            j = int(np.argmax((hi[i] - lo[i]) / scale))
            mid = 0.5 * (lo[i, j] + hi[i, j])
            left_hi, right_lo = hi[i].copy(), lo[i].copy()
            left_hi[j] = mid
            right_lo[j] = mid
            heapq.heappush(heap, (-ub[i], next(counter), lo[i].copy(), left_hi))
            heapq.heappush(heap, (-ub[i], next(counter), right_lo, hi[i].copy()))
            splits += 1
    return finish(SAT if found else UNSAT)


def check_counterexample(cex: Counterexample, system, model, query: FalsifierQuery) -> float:
    """Re-evaluate the violated clause at ``cex.x``; raise if it does not hold."""
    margins, zz, _ = clause_margins(system, model, query, cex.x)
    if cex.clause not in margins:
        raise FalsifierSoundnessError(f"unknown clause {cex.clause!r}")
    m = float(margins[cex.clause][0])
    if not m > 0:
        raise FalsifierSoundnessError(f"counterexample at {cex.x} has margin {m} <= 0 for {cex.clause}")
    if zz[0] < query.epsilon:
        raise FalsifierSoundnessError(f"counterexample at {cex.x} lies inside the excluded ball")
    return m


def grid_max_margin(system, model, query: FalsifierQuery, spacing=None, chunk: int = 65536) -> float:
    """Largest clause margin on a grid over ``{x in X : |z|^2 >= eps}``."""
    dom = query.domain
    spacing = 0.5 * query.delta if spacing is None else np.broadcast_to(spacing, dom.lo.shape)
    axes = [np.arange(dom.lo[i], dom.hi[i] + 0.5 * spacing[i], spacing[i]) for i in range(dom.dim)]
    axes = [np.clip(a, dom.lo[i], dom.hi[i]) for i, a in enumerate(axes)]
    total = int(np.prod([len(a) for a in axes]))
    best = -np.inf
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total)), [len(a) for a in axes])
        X = np.stack([axes[i][idx[i]] for i in range(dom.dim)], axis=-1)
        margins, zz, _ = clause_margins(system, model, query, X)
        keep = zz >= query.epsilon
        if np.any(keep):
            best = max(best, max(float(np.max(v[keep])) for v in margins.values()))
    return best

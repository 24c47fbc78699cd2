"""Lifted bilinear and linear models identified by extended DMD."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import kron_feature, solve_least_squares


@dataclass
class BilinearModel:
    """``z+ = K_d z + sum_i u_i B_i z``; the Euler form of ``z' = K z + sum_i u_i Q_i z``."""

    K_d: np.ndarray
    B: np.ndarray  # (m, N, N)
    T: float
    ill_conditioned: bool = False

    def __post_init__(self):
        self.K_d = np.asarray(self.K_d, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(-1, *self.K_d.shape)
        if self.T <= 0:
            raise ValueError("sampling period must be positive")

    @property
    def N(self) -> int:
        return self.K_d.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def K(self) -> np.ndarray:
        return (self.K_d - np.eye(self.N)) / self.T

    @property
    def Q(self) -> np.ndarray:
        return self.B / self.T

    def predict(self, z, u) -> np.ndarray:
        return predict(self, z, u)

    def to_dict(self) -> dict:
        return {"K_d": self.K_d.tolist(), "B": self.B.tolist(), "T": self.T,
                "ill_conditioned": self.ill_conditioned}

    @classmethod
    def from_dict(cls, d) -> "BilinearModel":
        return cls(np.array(d["K_d"]), np.array(d["B"]), d["T"], d.get("ill_conditioned", False))

    def to_csv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_matrix(directory / "K_d.csv", self.K_d)
        for i, Bi in enumerate(self.B):
            _write_matrix(directory / f"B_{i + 1}.csv", Bi)


@dataclass
class LinearModel:
    A_d: np.ndarray
    B_d: np.ndarray  # (N, m)
    T: float
    ill_conditioned: bool = False

    def predict(self, z, u) -> np.ndarray:
        return np.asarray(z) @ self.A_d.T + np.asarray(u) @ self.B_d.T


def _write_matrix(path, M) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(v)) for v in row])


def predict(model: BilinearModel, z, u) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    out = z @ model.K_d.T
    for i in range(model.m):
        out = out + u[..., i:i + 1] * (z @ model.B[i].T)
    return out


def _pairs(dataset, lift):
    x, u, x_next = dataset.transitions()
    return lift(x), u, lift(x_next)


def fit_bilinear_lifted(z, u, z_next, T: float, ridge: float = 0.0) -> BilinearModel:
    """Least-squares ``[K_d B_1 ... B_m]`` from lifted transition pairs (rows are samples)."""
    z = np.atleast_2d(z)
    u = np.asarray(u, dtype=float).reshape(z.shape[0], -1)
    Psi = kron_feature(u, z).T
    beta = np.atleast_2d(z_next).T
    if ridge > 0.0:
        ridge = ridge * np.trace(Psi @ Psi.T) / Psi.shape[0]
    M, flagged = solve_least_squares(Psi, beta, ridge=ridge)
    N = z.shape[1]
    blocks = M.reshape(N, u.shape[1] + 1, N).transpose(1, 0, 2)
    return BilinearModel(blocks[0], blocks[1:], T, flagged)


def fit_bilinear(dataset, lift, ridge: float = 0.0) -> BilinearModel:
    """Fit the bilinear model to a dataset through a frozen lift ``x -> z``."""
    z, u, z_next = _pairs(dataset, lift)
    return fit_bilinear_lifted(z, u, z_next, dataset.T, ridge)


def fit_linear_lifted(z, u, z_next, T: float) -> LinearModel:
    z = np.atleast_2d(z)
    u = np.asarray(u, dtype=float).reshape(z.shape[0], -1)
    feats = np.hstack([z, u]).T
    M, flagged = solve_least_squares(feats, np.atleast_2d(z_next).T, pinv=True)
    N = z.shape[1]
    return LinearModel(M[:, :N], M[:, N:], T, flagged)


def fit_linear(dataset, lift) -> LinearModel:
    z, u, z_next = _pairs(dataset, lift)
    return fit_linear_lifted(z, u, z_next, dataset.T)


def truncation_bound(model: BilinearModel, z_sup: float, z_k, u_k) -> float:
    """Local Euler truncation bound ``p L T^2`` with ``p = L * z_sup``.

    ``L`` is the larger of the spectral norms of the discrete step matrix
    ``K_d + sum_i u_i B_i`` and of the continuous generator
    ``K + sum_i u_i Q_i``. The generator term is what makes this an upper
    bound on the one-step gap; the discrete term is kept as a floor.
    ``z_k`` is accepted for interface symmetry and does not enter the bound.
    """
    u_k = np.asarray(u_k, dtype=float).reshape(-1)
    step = model.K_d + np.tensordot(u_k, model.B, axes=1) if model.m else model.K_d
    gen = (step - np.eye(model.N)) / model.T
    L = max(np.linalg.norm(step, 2), np.linalg.norm(gen, 2))
    p = L * float(z_sup)
    return p * L * model.T**2

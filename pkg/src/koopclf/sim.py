"""Black-box plants, RK4 discretization and open-loop dataset generation.

Every plant exposes a vectorized vector field ``deriv(x, u)`` acting on the
last axis, so the same callable serves single states and batches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

PLANT_NAMES = ("pendulum", "vanderpol", "cartpole", "hcw")


class IntegrationDiverged(FloatingPointError):
    """Raised when an RK4 step produces a non-finite state."""

    def __init__(self, state):
        self.state = np.asarray(state)
        super().__init__(f"integration diverged from state {self.state!r}")


class InsufficientData(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= x <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError(f"invalid box bounds {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, half_widths) -> "Box":
        h = np.asarray(half_widths, dtype=float)
        return cls(-h, h)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)


@dataclass(frozen=True)
class Plant:
    name: str
    n: int
    m: int
    deriv: Callable[[np.ndarray, np.ndarray], np.ndarray]
    X: Box
    U: Box
    T: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("plant needs n >= 1 and m >= 1")
        if self.X.dim != self.n or self.U.dim != self.m:
            raise ValueError("domain dimensions do not match plant")
        if not (self.X.contains(np.zeros(self.n)) and self.U.contains(np.zeros(self.m))):
            raise ValueError("state and input boxes must contain the origin")

    def step(self, x, u, T: float | None = None) -> np.ndarray:
        return rk4_step(self, x, u, self.T if T is None else T)


def rk4_step(plant: Plant, x, u, T: float) -> np.ndarray:
    """Classical RK4 step with the input held constant over ``[0, T]``."""
    if T <= 0:
        raise ValueError("T must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f = plant.deriv
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = f(x, u)
        k2 = f(x + 0.5 * T * k1, u)
        k3 = f(x + 0.5 * T * k2, u)
        k4 = f(x + T * k3, u)
        out = x + (T / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        bad = ~np.all(np.isfinite(out.reshape(-1, plant.n)), axis=-1)
        raise IntegrationDiverged(x.reshape(-1, plant.n)[bad][0])
    return out


# ---------------------------------------------------------------------------
# benchmark plants


def make_pendulum(m: float = 1.0, l: float = 1.0, g: float = 9.81,
                  u_max: float = 20.0, T: float = 0.005) -> Plant:
    coef = m * g / l

    def deriv(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.stack([x[..., 1], -coef * np.sin(x[..., 0]) + u[..., 0]], axis=-1)

    return Plant("pendulum", 2, 1, deriv, Box.symmetric([1.0, 1.0]),
                 Box.symmetric([u_max]), T, {"m": m, "l": l, "g": g})


def make_vanderpol(mu: float = 1.0, stiffness: float = -1.0, u_max: float = 20.0,
                   T: float = 0.01) -> Plant:
    """Van der Pol oscillator ``x2' = mu (1 - x1^2) x2 + stiffness * x1 + u``.

    ``stiffness=-1`` is the classical oscillator with a limit cycle around an
    unstable focus. ``stiffness=+1`` turns the origin into a saddle.
    """

    def deriv(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1 * x1) * x2 + stiffness * x1 + u[..., 0]], axis=-1)

    return Plant("vanderpol", 2, 1, deriv, Box.symmetric([10.0, 10.0]),
                 Box.symmetric([u_max]), T, {"mu": mu, "stiffness": stiffness})


def make_cartpole(m_c: float = 4.0, m_p: float = 1.0, l: float = 1.0, g: float = 9.81,
                  u_max: float = 30.0, T: float = 0.005) -> Plant:
    # state [x, theta, x_dot, theta_dot]

    def deriv(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)[..., 0]
        th, xd, thd = x[..., 1], x[..., 2], x[..., 3]
        s, c = np.sin(th), np.cos(th)
        den = m_c + m_p * s * s
        xdd = (u + m_p * s * (l * thd * thd - g * c)) / den
        thdd = (u * c + m_p * l * thd * thd * c * s - (m_c + m_p) * g * s) / (l * den)
        return np.stack([xd, thd, xdd, thdd], axis=-1)

    X = Box(np.array([-2.0, -0.8, -2.0, -2.0]), np.array([2.0, 0.8, 2.0, 2.0]))
    return Plant("cartpole", 4, 1, deriv, X, Box.symmetric([u_max]), T,
                 {"m_c": m_c, "m_p": m_p, "l": l, "g": g})


def hcw_mean_motion(mu: float = 3.986e14, a: float = 6793137.0) -> float:
    return math.sqrt(mu / a**3)


def make_hcw(mu: float = 3.986e14, a: float = 6793137.0, u_max: float = 30.0,
             T: float = 0.005) -> Plant:
    n_orb = hcw_mean_motion(mu, a)

    def deriv(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        px, vx, vy = x[..., 0], x[..., 2], x[..., 3]
        ax = 3.0 * n_orb**2 * px + 2.0 * n_orb * vy + u[..., 0]
        ay = -2.0 * n_orb * vx + u[..., 1]
        return np.stack([vx, vy, ax, ay], axis=-1)

    return Plant("hcw", 4, 2, deriv, Box.symmetric([10.0] * 4), Box.symmetric([u_max] * 2),
                 T, {"mu": mu, "a": a, "n": n_orb})


_FACTORIES = {
    "pendulum": make_pendulum,
    "vanderpol": make_vanderpol,
    "cartpole": make_cartpole,
    "hcw": make_hcw,
}


def make_plant(name: str, **kwargs) -> Plant:
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown plant {name!r}; valid plants: {', '.join(PLANT_NAMES)}") from None
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Snapshot sequence built from concatenated short trajectories.

    ``inputs[k]`` drives ``states[k] -> states[k+1]``. Rows where a trajectory
    ends carry NaN inputs and are not transitions.
    """

    states: np.ndarray
    inputs: np.ndarray
    T: float
    plant: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.states.ndim != 2 or self.inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-D")
        if self.inputs.shape[0] != self.states.shape[0] - 1:
            raise ValueError("need exactly one input row per transition slot")

    @property
    def N_d(self) -> int:
        return self.states.shape[0]

    @property
    def valid(self) -> np.ndarray:
        """Mask over the ``N_d - 1`` slots that are genuine transitions."""
        return np.all(np.isfinite(self.inputs), axis=1)

    def transitions(self):
        v = self.valid
        return self.states[:-1][v], self.inputs[v], self.states[1:][v]

    def to_csv(self, path) -> None:
        path = Path(path)
        n, m = self.states.shape[1], self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)])
            for k in range(self.N_d):
                row = [str(k)] + [repr(float(v)) for v in self.states[k]]
                if k < self.N_d - 1 and np.all(np.isfinite(self.inputs[k])):
                    row += [repr(float(v)) for v in self.inputs[k]]
                else:
                    row += [""] * m
                w.writerow(row)
        meta = {"plant": self.plant, "T": self.T, "seed": self.seed, "N_d": self.N_d}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        path = Path(path)
        meta = json.loads(path.with_suffix(".meta.json").read_text())
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        n = sum(h.startswith("x_") for h in header)
        m = sum(h.startswith("u_") for h in header)
        states = np.array([[float(v) for v in r[1:1 + n]] for r in rows[1:]])
        inputs = np.array([[float(v) if v else np.nan for v in r[1 + n:1 + n + m]] for r in rows[1:-1]])
        return cls(states, inputs.reshape(-1, m), meta["T"], meta.get("plant", ""), meta.get("seed"))


def generate_dataset(plant: Plant, N_d: int, T: float | None = None, seed: int = 0,
                     traj_len: int = 50, max_draws: int | None = None) -> Dataset:
    """Collect ``N_d`` snapshots from random-input open-loop trajectories.

    Initial states and inputs are uniform over ``X`` and ``U``. A trajectory
    stops when it reaches ``traj_len`` snapshots, the budget, or leaves ``X``.
    Trajectory ``i`` draws from its own stream seeded by ``(seed, i)``.
    """
    if N_d < 2:
        raise ValueError("N_d must be at least 2")
    if traj_len < 2:
        raise ValueError("traj_len must be at least 2")
    T = plant.T if T is None else T
    max_draws = max_draws if max_draws is not None else 100 * N_d
    states, inputs = [], []
    idx = 0
    while len(states) < N_d:
        if idx >= max_draws:
            raise InsufficientData(f"only {len(states)} of {N_d} in-domain snapshots after {idx} trajectories")
        rng = np.random.default_rng([seed, idx])
        idx += 1
        budget = min(traj_len, N_d - len(states))
        x = plant.X.sample(rng)
        if budget == 1:
            # trailing lone snapshot, no transition out of it
            states.append(x)
            inputs.append(np.full(plant.m, np.nan))
            break
        traj_x, traj_u = [x], []
        while len(traj_x) < budget:
            u = plant.U.sample(rng)
            x_next = rk4_step(plant, x, u, T)
            if not plant.X.contains(x_next):
                break
            traj_u.append(u)
            traj_x.append(x_next)
            x = x_next
        if len(traj_x) < 2:
            continue
        states.extend(traj_x)
        inputs.extend(traj_u)
        inputs.append(np.full(plant.m, np.nan))
    states = np.array(states[:N_d])
    inputs = np.array(inputs[:N_d - 1])
    return Dataset(states, inputs, T, plant.name, seed)

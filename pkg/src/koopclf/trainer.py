"""Learner/falsifier loop: train lift, model and CLF until the falsifier proves the CLF conditions."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .controller import run_rollouts
from .edmd import BilinearModel, fit_bilinear
from .falsifier import (BUDGET, SAT, UNSAT, Certificate, FalsifierQuery, NetworkSystem,
                        check_counterexample, estimate_epsilon, falsify)
from .losses import LossWeights, TrainingBatch, assemble
from .nets import AdamState, NetworkBundle, adam_step, default_bundle, param_gradient, spec_from_dict
from .sim import Dataset, Plant, make_plant

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "recons", "dyn", "phy", "lyap", "roa", "total", "worst_violation_margin"]
ROUND_FIELDS = ["round", "outcome", "epochs", "total_loss", "n_counterexamples", "cex_clause",
                "cex_margin", "cex_x", "epsilon", "boxes_processed", "splits", "wall_time"]

_LARGE = {"N": 12, "hidden_enc": (32, 32), "hidden_clf": (32, 32),
          "alpha1": 0.05, "alpha2": 3.0, "alpha3": 0.05, "N_d": 4000}
PLANT_DEFAULTS = {
    "pendulum": {},
    "vanderpol": {},
    "cartpole": _LARGE,
    "hcw": _LARGE,
}


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; ``state`` is the last good state."""

    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


@dataclass
class TrainConfig:
    plant: str = "pendulum"
    N: int = 6
    hidden_enc: tuple = (6,)
    hidden_dec: tuple = (16, 16)
    hidden_clf: tuple = (6,)
    clf_kind: str = "quadratic"
    clf_gamma: float = 0.1
    n_w: int = 2
    state_inclusive: bool = True
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
    lr: float = 1e-3
    epochs_per_round: int = 900
    max_rounds: int = 20
    loss_tol: float = 1e-5
    seed: int = 0
    data_seed: int = 0
    T: float | None = None
    N_d: int = 4000
    traj_len: int = 50
    eps_factor: float = 1e-3
    delta_factor: float = 1e-3
    budget: int = 1_000_000
    falsifier_batch: int = 128
    u_mode: str = "sontag"
    clip_u: bool = True
    ridge: float = 0.0
    cex_neighbors: int = 8
    cex_radius: float = 0.01  # fraction of the domain width

    def __post_init__(self):
        for name in ("hidden_enc", "hidden_dec", "hidden_clf"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))
        if self.epochs_per_round < 0:
            raise ValueError("epochs_per_round must be nonnegative")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.N < 1 or self.N_d < 2:
            raise ValueError("need N >= 1 and N_d >= 2")
        if self.clf_kind not in ("quadratic", "mlp"):
            raise ValueError(f"unknown CLF kind {self.clf_kind!r}")
        if self.u_mode not in ("sontag", "dataset"):
            raise ValueError(f"unknown input mode {self.u_mode!r}")
        if self.lr <= 0 or self.eps_factor <= 0 or self.delta_factor <= 0:
            raise ValueError("lr, eps_factor and delta_factor must be positive")
        self.weights()  # validates the loss weights

    @classmethod
    def for_plant(cls, plant: str, **overrides) -> "TrainConfig":
        if plant not in PLANT_DEFAULTS:
            make_plant(plant)  # raises with the list of valid names
        return cls(plant=plant, **{**PLANT_DEFAULTS[plant], **overrides})

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.gamma4,
                           self.roa_hinged, self.exponential, self.gamma1, self.gamma2, self.gamma3)

    def make_plant(self) -> Plant:
        plant = make_plant(self.plant)
        if self.T is not None and self.T != plant.T:
            plant = dataclasses.replace(plant, T=float(self.T))
        return plant

    def make_bundle(self, n: int) -> NetworkBundle:
        return default_bundle(n, self.N, self.hidden_enc, self.hidden_dec, self.hidden_clf,
                              self.clf_kind, self.clf_gamma, self.n_w,
                              state_inclusive=self.state_inclusive)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("hidden_enc", "hidden_dec", "hidden_clf"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class TrainState:
    theta: np.ndarray
    adam: AdamState
    model: BilinearModel | None = None
    cex: np.ndarray = None  # (k, n) counterexample states
    epoch: int = 0
    round: int = 0
    history: list = field(default_factory=list)  # rows of LOG_FIELDS

    def copy(self) -> "TrainState":
        return TrainState(self.theta.copy(), AdamState(self.adam.m.copy(), self.adam.v.copy(), self.adam.t),
                          self.model, self.cex.copy(), self.epoch, self.round, list(self.history))


@dataclass
class RoundRecord:
    round: int
    outcome: str
    epochs: int
    total_loss: float
    n_counterexamples: int
    epsilon: float
    boxes_processed: int
    splits: int
    wall_time: float
    cex: object = None

    def row(self) -> dict:
        c = self.cex
        return {"round": self.round, "outcome": self.outcome, "epochs": self.epochs,
                "total_loss": repr(self.total_loss), "n_counterexamples": self.n_counterexamples,
                "cex_clause": c.clause if c else "", "cex_margin": repr(c.margin) if c else "",
                "cex_x": " ".join(repr(float(v)) for v in c.x) if c else "",
                "epsilon": repr(self.epsilon), "boxes_processed": self.boxes_processed,
                "splits": self.splits, "wall_time": f"{self.wall_time:.3f}"}


@dataclass
class Artifacts:
    config: TrainConfig
    plant: Plant
    bundle: NetworkBundle
    model: BilinearModel
    certificate: Certificate
    state: TrainState
    rounds: list
    dataset_hash: str = ""

    @property
    def status(self) -> str:
        return self.certificate.outcome

    def lift(self, x):
        return self.bundle.lift(x)

    def clf(self, z):
        return self.bundle.V_grad(z)


def dataset_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.states).tobytes())
    h.update(np.ascontiguousarray(dataset.inputs).tobytes())
    h.update(repr(float(dataset.T)).encode())
    return h.hexdigest()


def init_state(config: TrainConfig, bundle: NetworkBundle, n: int) -> TrainState:
    bundle.init(config.seed)
    return TrainState(bundle.theta.copy(), AdamState.zeros(bundle.size), cex=np.zeros((0, n)))


def learning_round(config: TrainConfig, dataset: Dataset, state: TrainState, bundle: NetworkBundle,
                   plant: Plant, log_rows=None) -> TrainState:
    """Run up to ``epochs_per_round`` epochs of refit + loss + Adam.

    Each epoch re-identifies the bilinear model from the current lift, forms
    the total loss over the dataset and the counterexample states, and takes
    one Adam step on all network parameters. ``log_rows`` (a list) receives
    one :data:`LOG_FIELDS` row per epoch.
    """
    if dataset.N_d < 2 or not np.any(dataset.valid):
        raise ValueError("dataset has no transitions")
    state = state.copy()
    weights = config.weights()
    batch = TrainingBatch.from_dataset(dataset, plant.U, state.cex)
    T = dataset.T

    def step(x, u):
        return plant.step(x, u, T)

    for _ in range(config.epochs_per_round):
        theta = ad.Var(state.theta)
        try:
            total, report, model, _ = assemble(bundle, theta, batch, None, weights, step=step, T=T,
                                               u_mode=config.u_mode, clip_u=config.clip_u,
                                               refit=True, ridge=config.ridge)
            grad = param_gradient(total, theta)
        except (ad.GradientOverflow, FloatingPointError, np.linalg.LinAlgError) as e:
            raise TrainingDiverged(f"epoch {state.epoch + 1}: {e}", state) from e
        if not (np.isfinite(report.total) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"epoch {state.epoch + 1}: non-finite loss", state)
        state.epoch += 1
        row = {"epoch": state.epoch, "recons": report.recons, "dyn": report.dyn, "phy": report.phy,
               "lyap": report.lyap, "roa": report.roa, "total": report.total,
               "worst_violation_margin": report.worst_margin}
        state.history.append(row)
        if log_rows is not None:
            log_rows.append(row)
        if report.total < config.loss_tol:
            break
        state.theta, state.adam = adam_step(state.adam, state.theta, grad, lr=config.lr)
    bundle.theta = state.theta.copy()
    state.model = fit_bilinear(dataset, bundle.lift, config.ridge)
    return state


def make_query(config: TrainConfig, plant: Plant, bundle: NetworkBundle) -> FalsifierQuery:
    eps = estimate_epsilon(bundle.lift, plant.X, config.eps_factor)
    return FalsifierQuery(plant.X, eps, delta=config.delta_factor * plant.X.width, budget=config.budget,
                          mode=config.u_mode, U=plant.U, exponential=config.exponential,
                          gamma1=config.gamma1, gamma2=config.gamma2, gamma3=config.gamma3,
                          batch=config.falsifier_batch)


def verify(config: TrainConfig, plant: Plant, bundle: NetworkBundle, model: BilinearModel):
    """Run the falsifier on the current parameters; returns ``(query, result)``."""
    query = make_query(config, plant, bundle)
    result = falsify(query, NetworkSystem(bundle), model)
    system = NetworkSystem(bundle)
    for c in result.counterexamples:
        check_counterexample(c, system, model, query)
    return query, result


def _add_counterexamples(state: TrainState, cexs, delta, X, rng, neighbors: int = 0,
                         radius=0.0) -> int:
    """Append counterexample states (jittered if within ``delta`` of a stored one)
    plus ``neighbors`` uniform samples in a box of half-width ``radius`` around each."""
    added = 0
    for c in cexs:
        x = c.x.copy()
        if len(state.cex) and np.min(np.max(np.abs(state.cex - x) / delta, axis=1)) < 1.0:
            x = X.clip(x + rng.uniform(-1.0, 1.0, size=x.shape) * delta)
            log.warning("repeated counterexample near %s; jittered to %s", c.x, x)
        pts = [x[None]]
        if neighbors:
            pts.append(X.clip(x + rng.uniform(-1.0, 1.0, size=(neighbors, x.size)) * radius))
        state.cex = np.vstack([state.cex, *pts])
        added += 1
    return added


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def write_round_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROUND_FIELDS)
        w.writeheader()
        for rec in records:
            w.writerow(rec.row())


def save_checkpoint(path, config: TrainConfig, bundle: NetworkBundle, state: TrainState,
                    certificate: Certificate | None = None, data_hash: str = "") -> None:
    doc = {
        "format": 1,
        "config": config.to_dict(),
        "networks": bundle.to_dict(),
        "theta": [float(v) for v in state.theta],
        "adam": {"m": [float(v) for v in state.adam.m], "v": [float(v) for v in state.adam.v],
                 "t": state.adam.t},
        "model": state.model.to_dict() if state.model is not None else None,
        "counterexamples": state.cex.tolist(),
        "epoch": state.epoch,
        "round": state.round,
        "certificate": certificate.to_text() if certificate is not None else None,
        "dataset_sha256": data_hash,
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n")
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(config, bundle, state, certificate or None, dataset hash)``."""
    doc = json.loads(Path(path).read_text())
    config = TrainConfig.from_dict(doc["config"])
    nets = doc["networks"]
    bundle = NetworkBundle(spec_from_dict(nets["encoder"]), spec_from_dict(nets["decoder"]),
                           spec_from_dict(nets["clf"]), state_inclusive=nets.get("state_inclusive", False))
    bundle.theta = np.array(doc["theta"], dtype=float)
    adam = AdamState(np.array(doc["adam"]["m"]), np.array(doc["adam"]["v"]), doc["adam"]["t"])
    model = BilinearModel.from_dict(doc["model"]) if doc.get("model") else None
    n = bundle.encoder.n_in
    cex = np.array(doc["counterexamples"], dtype=float).reshape(-1, n)
    state = TrainState(bundle.theta.copy(), adam, model, cex, doc["epoch"], doc["round"])
    cert = None
    if doc.get("certificate"):
        cert = Certificate.from_text(doc["certificate"], str(path))
    return config, bundle, state, cert, doc.get("dataset_sha256", "")


def cegis_loop(config: TrainConfig, dataset: Dataset, out_dir=None, plant: Plant | None = None) -> Artifacts:
    """Alternate learning rounds and falsification until UNSAT or the round limit.

    With ``out_dir`` set, the training log, round log, checkpoint and
    certificate are (re)written at every round boundary. ``plant`` overrides
    the registered plant named in the config (used for synthetic systems).
    """
    plant = config.make_plant() if plant is None else plant
    if dataset.states.shape[1] != plant.n:
        raise ValueError(f"dataset has {dataset.states.shape[1]} state columns, plant {plant.name} has {plant.n}")
    bundle = config.make_bundle(plant.n)
    state = init_state(config, bundle, plant.n)
    rng = np.random.default_rng([config.seed, 7919])
    data_hash = dataset_hash(dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_rows, records = [], []
    cert = None
    for rnd in range(1, config.max_rounds + 1):
        t0 = time.perf_counter()
        state = learning_round(config, dataset, state, bundle, plant, log_rows)
        state.round = rnd
        query, res = verify(config, plant, bundle, state.model)
        n_added = 0
        if res.outcome == SAT:
            n_added = _add_counterexamples(state, res.counterexamples, query.delta, plant.X, rng,
                                           config.cex_neighbors, config.cex_radius * plant.X.width)
        total = log_rows[-1]["total"] if log_rows else float("nan")
        rec = RoundRecord(rnd, res.outcome, config.epochs_per_round, total, len(state.cex),
                          query.epsilon, res.boxes_processed, res.splits,
                          time.perf_counter() - t0, res.counterexample)
        records.append(rec)
        log.info("round %d: %s (boxes %d, counterexamples %d, added %d)", rnd, res.outcome,
                 res.boxes_processed, len(state.cex), n_added)
        cert = res.certificate()
        if out is not None:
            write_training_log(log_rows, out / "training_log.csv")
            write_round_log(records, out / "round_log.csv")
            save_checkpoint(out / "checkpoint.json", config, bundle, state, cert, data_hash)
        if res.outcome == UNSAT:
            break
    if cert.outcome != UNSAT:
        # round limit reached without a proof
        cert = dataclasses.replace(cert, outcome=BUDGET, extra={**cert.extra, "reason": "round_limit"})
    if out is not None:
        cert.write(out / "certificate.txt")
        save_checkpoint(out / "checkpoint.json", config, bundle, state, cert, data_hash)
        state.model.to_csv(out / "model")
    return Artifacts(config, plant, bundle, state.model, cert, state, records, data_hash)


def run_control_phase(artifacts: Artifacts, x0s, **kwargs):
    """Closed-loop rollouts of the true plant from each initial state."""
    return run_rollouts(artifacts.plant, artifacts.bundle.lift, artifacts.bundle.V_grad,
                        artifacts.model, x0s, **kwargs)


"""Command-line interface: ``koopclf generate | train | simulate | verify``.

Exit codes: 0 on success (UNSAT for ``train`` and ``verify``), 2 when no
certificate was obtained (SAT or BUDGET), 1 on usage or I/O errors.

Outputs go under ``$KOOPCLF_OUTPUT_ROOT`` (default ``./runs``) unless
``--out`` is given. Training options come from a flat ``key = value`` config
file, then from ``--set key=value`` and the dedicated flags, in that order.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .controller import run_rollouts, write_phase_csv
from .falsifier import UNSAT, Certificate, FalsifierSoundnessError
from .sim import PLANT_NAMES, Dataset, InsufficientData, generate_dataset, make_plant

EXIT_OK, EXIT_USAGE, EXIT_NO_CERT = 0, 1, 2
OUTPUT_ROOT_ENV = "KOOPCLF_OUTPUT_ROOT"

log = logging.getLogger("koopclf")


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ---------------------------------------------------------------------------
# configuration

_FIELDS = {f.name: f for f in dataclasses.fields(trainer.TrainConfig)}
_DEFAULTS = trainer.TrainConfig()


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of TrainConfig field ``key``."""
    if key not in _FIELDS:
        raise ValueError(f"unknown key {key!r}")
    text = text.strip()
    default = getattr(_DEFAULTS, key)
    if key == "T":
        return None if text.lower() in ("", "none", "default") else float(text)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key} expects a boolean, got {text!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    if isinstance(default, int):
        return int(float(text)) if "e" in text.lower() else int(text)
    if isinstance(default, float):
        return float(text)
    return text


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(path, lineno, f"duplicate key {key!r}")
        try:
            out[key] = parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(path, lineno, str(exc)) from None
    return out


def write_config(config: trainer.TrainConfig, path) -> None:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def build_config(args) -> trainer.TrainConfig:
    values = read_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            values[key.strip()] = parse_value(key.strip(), value)
        except ValueError as exc:
            raise UsageError(f"--set {item}: {exc}") from None
    flags = {"plant": args.plant, "epochs_per_round": args.epochs, "max_rounds": args.rounds,
             "seed": args.seed, "N_d": args.n}
    values.update({k: v for k, v in flags.items() if v is not None})
    plant = values.pop("plant", "pendulum")
    if plant not in PLANT_NAMES:
        raise UsageError(f"unknown plant {plant!r}; valid plants: {', '.join(PLANT_NAMES)}")
    try:
        return trainer.TrainConfig.for_plant(plant, **values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    if args.plant not in PLANT_NAMES:
        raise UsageError(f"unknown plant {args.plant!r}; valid plants: {', '.join(PLANT_NAMES)}")
    plant = make_plant(args.plant)
    out = Path(args.out) if args.out else output_root() / args.plant
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(plant, args.n, T=args.T, seed=args.seed, traj_len=args.traj_len)
    path = out / "dataset.csv"
    ds.to_csv(path)
    print(f"wrote {ds.N_d} snapshots to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_config(args)
    out = Path(args.out) if args.out else output_root() / config.plant
    out.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.dataset) if args.dataset else out / "dataset.csv"
    plant = config.make_plant()
    if args.generate:
        ds = generate_dataset(plant, config.N_d, T=plant.T, seed=config.data_seed,
                              traj_len=config.traj_len)
        ds.to_csv(data_path)
    elif not data_path.exists():
        raise UsageError(f"dataset {data_path} not found (run 'generate' or pass --generate)")
    else:
        ds = Dataset.from_csv(data_path)
        if ds.plant and ds.plant != config.plant:
            raise UsageError(f"dataset was generated for {ds.plant!r}, config trains {config.plant!r}")
        if abs(ds.T - plant.T) > 1e-15:
            raise UsageError(f"dataset sampling period {ds.T} differs from the plant's {plant.T}")
    write_config(config, out / "config.txt")
    art = trainer.cegis_loop(config, ds, out)
    print(f"{art.status} after {len(art.rounds)} round(s); certificate in {out / 'certificate.txt'}")
    return EXIT_OK if art.status == UNSAT else EXIT_NO_CERT


def _load(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return trainer.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_simulate(args) -> int:
    lift = clf = model = None
    if args.checkpoint:
        config, bundle, state, cert, _ = _load(args.checkpoint)
        plant = config.make_plant()
        lift, clf, model = bundle.lift, bundle.V_grad, state.model
        if args.plant and args.plant != config.plant:
            raise UsageError(f"--plant {args.plant} does not match the checkpoint's {config.plant}")
        certified = cert is not None and cert.outcome == UNSAT
        if not (certified or args.force or args.uncontrolled):
            raise UsageError("checkpoint carries no UNSAT certificate; use --force to simulate anyway")
    elif args.uncontrolled and args.plant:
        if args.plant not in PLANT_NAMES:
            raise UsageError(f"unknown plant {args.plant!r}; valid plants: {', '.join(PLANT_NAMES)}")
        plant = make_plant(args.plant)
    else:
        raise UsageError("simulate needs --checkpoint (or --uncontrolled with --plant)")
    out = Path(args.out) if args.out else output_root() / plant.name / (
        "uncontrolled" if args.uncontrolled else "rollouts")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    x0s = plant.X.sample(rng, size=args.n_initial).reshape(-1, plant.n)
    horizon = int(round(args.duration / plant.T))
    summary = run_rollouts(plant, lift, clf, model, x0s, horizon=horizon, stop_tol=args.stop_tol,
                           controlled=not args.uncontrolled)
    for i, r in enumerate(summary.rollouts):
        r.to_csv(out / f"rollout_{i:03d}.csv")
    if summary.rollouts:
        write_phase_csv(summary, out / "phase.csv")
    summary.to_csv(out / "summary.csv")
    print(f"{summary.n_converged}/{len(summary.rollouts)} rollouts converged; outputs in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    config, bundle, state, stored, _ = _load(args.checkpoint)
    if state.model is None:
        raise UsageError("checkpoint holds no fitted model")
    plant = config.make_plant()
    try:
        _, res = trainer.verify(config, plant, bundle, state.model)
    except FalsifierSoundnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cert = res.certificate()
    path = Path(args.out) if args.out else Path(args.checkpoint).with_name("verify_certificate.txt")
    cert.write(path)
    if stored is not None:
        same = stored.outcome == cert.outcome or (stored.extra.get("reason") == "round_limit"
                                                  and cert.outcome != UNSAT)
        print(f"{cert.outcome}; stored certificate says {stored.outcome}"
              f"{'' if same else ' (MISMATCH)'}")
    else:
        print(cert.outcome)
    return EXIT_OK if cert.outcome == UNSAT else EXIT_NO_CERT


# ---------------------------------------------------------------------------
# argument parsing

def _config_help() -> str:
    rows = [f"  {k} = {v}" for k, v in trainer.TrainConfig().to_dict().items()]
    return "configuration keys and pendulum defaults:\n" + "\n".join(rows)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopclf", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="collect a snapshot dataset")
    g.add_argument("--plant", required=True, help=f"one of: {', '.join(PLANT_NAMES)}")
    g.add_argument("--n", type=int, default=2000, help="number of snapshots N_d (default 2000)")
    g.add_argument("--T", type=float, default=None, help="sampling period (default: plant's)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--traj-len", type=int, default=50, help="snapshots per trajectory (default 50)")
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the learner/falsifier loop",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_help())
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--plant", help=f"one of: {', '.join(PLANT_NAMES)}")
    t.add_argument("--epochs", type=int, help="epochs per learning round")
    t.add_argument("--rounds", type=int, help="maximum CEGIS rounds")
    t.add_argument("--seed", type=int, help="network initialisation seed")
    t.add_argument("--n", type=int, help="dataset size N_d")
    t.add_argument("--dataset", help="dataset CSV (default: <out>/dataset.csv)")
    t.add_argument("--generate", action="store_true", help="generate the dataset first")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="closed-loop rollouts from a checkpoint")
    s.add_argument("--checkpoint", help="checkpoint.json written by train")
    s.add_argument("--plant", help="plant for --uncontrolled runs without a checkpoint")
    s.add_argument("--n-initial", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=10.0, help="simulated seconds (default 10)")
    s.add_argument("--stop-tol", type=float, default=None, help="stop once ||x|| < this")
    s.add_argument("--uncontrolled", action="store_true", help="apply u = 0")
    s.add_argument("--force", action="store_true", help="simulate without an UNSAT certificate")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="rerun the falsifier on a checkpoint")
    v.add_argument("checkpoint")
    v.add_argument("--out", help="certificate path (default: next to the checkpoint)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, InsufficientData) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

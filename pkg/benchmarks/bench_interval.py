"""Compare the compiled and numpy interval MLP kernels.

Usage: python3 benchmarks/bench_interval.py [--repeat R]

Times one batched enclosure (values and input Jacobian) of the default
pendulum encoder and of a wider cart-pole-sized network, then a complete
falsifier pass on a randomly initialised pendulum bundle with each backend.
"""

import argparse
import time

import numpy as np

from koopclf import kernels
from koopclf.edmd import BilinearModel
from koopclf.falsifier import FalsifierQuery, NetworkSystem, falsify
from koopclf.nets import MlpSpec, default_bundle, init_params
from koopclf.sim import make_pendulum


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_case(sizes, batch, repeat):
    rng = np.random.default_rng(0)
    spec = MlpSpec(sizes)
    layers = spec.unpack(init_params(spec, rng))
    c = rng.uniform(-1, 1, size=(batch, sizes[0]))
    r = rng.uniform(0, 0.05, size=(batch, sizes[0]))
    out = {}
    for backend in ("python", "cython"):
        out[backend] = best_of(lambda: kernels.interval_mlp(c - r, c + r, layers, False, backend=backend), repeat)
    return out


def falsifier_case(repeat):
    plant = make_pendulum()
    bundle = default_bundle(2, 6).init(0)
    N = bundle.N
    model = BilinearModel(np.eye(N) - plant.T * np.eye(N), plant.T * 0.1 * np.ones((1, N, N)), plant.T)
    query = FalsifierQuery(plant.X, 1e-3, budget=20_000)
    out = {}
    saved = kernels._impl
    try:
        for backend in ("python", "cython"):
            kernels._impl = kernels._interval_py if backend == "python" else __import__(
                "koopclf._interval_ext", fromlist=["interval_mlp"])
            out[backend] = best_of(lambda: falsify(query, NetworkSystem(bundle), model), repeat)
    finally:
        kernels._impl = saved
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        import koopclf._interval_ext  # noqa: F401
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rows = [
        ("encoder 2-6-4, 128 boxes", kernel_case((2, 6, 4), 128, args.repeat)),
        ("encoder 4-32-32-8, 128 boxes", kernel_case((4, 32, 32, 8), 128, args.repeat)),
        ("encoder 4-32-32-8, 2048 boxes", kernel_case((4, 32, 32, 8), 2048, args.repeat)),
        ("falsifier pass, pendulum, 20k splits", falsifier_case(max(1, args.repeat // 2))),
    ]
    print(f"{'case':40s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s}")
    for name, t in rows:
        print(f"{name:40s} {1e3 * t['python']:12.2f} {1e3 * t['cython']:12.2f} {t['python'] / t['cython']:8.2f}")


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy phase-sweep kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 16 32 64]

Each timing is the best of ``--repeat`` runs of three full element sweeps
on a reference-scenario sized problem (M = 8, K = 4).  Both kernels start from the
same phases and must land on the same objective.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rismrl import _kernels_py

try:
    from rismrl import _kernels
except ImportError:  # extension not built
    _kernels = None


def problem(n: int, m: int = 8, k: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))
    h1 = rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))
    contrib = np.ascontiguousarray(np.einsum("kn,nm->nkm", g, h1))
    theta = rng.uniform(0, 2 * np.pi, n)
    return contrib, theta


def run(impl, contrib, theta0, sweeps: int = 3):
    theta = theta0.copy()
    h = np.ascontiguousarray(np.einsum("n,nkm->km", np.exp(1j * theta), contrib))
    t0 = time.perf_counter()
    for _ in range(sweeps):
        f = impl.sfp_sweep(contrib, theta, h, 64, 20)
    return time.perf_counter() - t0, f


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled kernel not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print(f"{'N':>4} {'numpy [s]':>11} {'compiled [s]':>13} {'speedup':>8} {'|df|':>9}")
    for n in args.sizes:
        contrib, theta = problem(n)
        py = [run(_kernels_py, contrib, theta) for _ in range(args.repeat)]
        cy = [run(_kernels, contrib, theta) for _ in range(args.repeat)]
        tp, fp = min(py)
        tc, fc = min(cy)
        print(f"{n:4d} {tp:11.4f} {tc:13.4f} {tp / tc:8.1f} {abs(fp - fc):9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Benchmark the compiled kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--quick]

Compares the counter-based Gaussian stream and the Euler-Maruyama steppers on
the shipped media. The compiled path wins on per-path sequential stepping
(its advantage grows with step count); the numpy path is the portable
fallback and the reference implementation.
"""

import argparse
import time

import numpy as np

from homlab import kernels
from homlab.kernels import numpy_backend
from homlab.medium import (make_chessboard_medium, make_constant_medium,
                           make_periodic_medium, make_trig1dw_medium,
                           MollifierSpec)


def timeit(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_normals(n, quick):
    paths = np.arange(n, dtype=np.uint64)
    rows = []
    for name, mod in _backends():
        dt = timeit(lambda m=mod: m.normals(7, paths, 3, 0, 2))
        rows.append((f"normals x{n}", name, n / dt / 1e6, "Mdraw-pairs/s"))
    return rows


def bench_em(medium, label, n_paths, n_steps, dt_step):
    paths = np.arange(n_paths, dtype=np.uint64)
    x0 = np.zeros((n_paths, medium.dim))
    sh_t = np.zeros(n_paths)
    sh_x = np.zeros((n_paths, medium.dim))
    rows = []
    for name, mod in _backends():
        if name == "cython":
            def run():
                kernels.em_paths(medium.payload, 1, paths, x0, sh_t, sh_x, 0,
                                 dt_step, n_steps, rec_stride=n_steps)
        else:
            def run():
                numpy_backend.em_paths(medium.payload, 1, paths, x0, sh_t, sh_x,
                                       0, dt_step, n_steps, rec_stride=n_steps)
        dt = timeit(run, repeat=2)
        rows.append((f"em {label} {n_paths}x{n_steps}", name,
                     n_paths * n_steps / dt / 1e6, "Mpath-steps/s"))
    return rows


def _backends():
    out = [("numpy", numpy_backend)]
    if kernels.HAVE_SPEEDUPS:
        out.insert(0, ("cython", kernels._speedups))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="smaller workloads")
    args = ap.parse_args()
    scale = 4 if args.quick else 1

    rows = []
    rows += bench_normals((1 << 21) // scale, args.quick)
    media = [
        (make_constant_medium(np.eye(2)), "constant", 2000 // scale, 4000),
        (make_periodic_medium(), "periodic31", 2000 // scale, 4000),
        (make_trig1dw_medium(1.0, 0.5, 1.0), "trig1dw", 2000 // scale, 4000),
        (make_chessboard_medium(0.5, MollifierSpec(0.25), seed=3,
                                extent=(256, 64, 64)), "chessboard",
         2000 // scale, 4000),
    ]
    for med, label, n_paths, n_steps in media:
        rows += bench_em(med, label, n_paths, n_steps, 0.002)

    width = max(len(r[0]) for r in rows)
    print(f"{'workload':{width}s}  {'backend':7s}  {'rate':>10s}  unit")
    base = {}
    for workload, name, rate, unit in rows:
        note = ""
        if name == "cython":
            base[workload] = rate
        elif workload in base:
            note = f"  ({base[workload] / rate:.1f}x slower)"
        print(f"{workload:{width}s}  {name:7s}  {rate:10.2f}  {unit}{note}")


if __name__ == "__main__":
    main()

"""Time the compiled kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--reps N] [--n N] [--csv PATH]
"""

import argparse
import csv
import sys
import time

import numpy as np

from newtonop import kernels
from newtonop.newton import assemble_jacobian
from newtonop.problems import nonconvex2d


def best_of(fn, reps):
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n):
    p = nonconvex2d(n)
    x = p.to_vector(p.initial_lift()) + 0.1
    M = assemble_jacobian(p, x)
    rhs = -p.residual_vec(x)
    tol = 1e-14 * np.max(np.abs(M.storage))
    G = np.random.default_rng(0).normal(size=(60, 60))
    G = G @ G.T

    def lu(mod):
        work = M.skewed()
        mult, piv = mod.band_lu_factor(work, M.kl, M.ku, tol)
        return mod.band_lu_solve(work, mult, piv, M.kl, M.ku, rhs)

    def rng(mod):
        state = np.array([1, 2, 3, 4], dtype=np.uint64)
        return mod.xoshiro_fill(state, 100_000)

    return {
        f"band LU solve (n={n}, order {M.n})": lu,
        "xoshiro256++ 1e5 draws": rng,
        "Jacobi eigh 60x60": lambda mod: mod.jacobi_eigh(G),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--n", type=int, default=63)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    names = kernels.available_backends()
    if "cython" not in names:
        print("compiled backend not built; only the fallback is timed", file=sys.stderr)
    rows = []
    for label, fn in cases(args.n).items():
        t = {name: best_of(lambda: fn(kernels.get_backend(name)), args.reps) for name in names}
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        rows.append((label, t.get("cython", float("nan")), t["python"], speed))
        print(f"{label:40s} cython {t.get('cython', float('nan')):9.4f}s  python {t['python']:9.4f}s  x{speed:.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "cython_seconds", "python_seconds", "speedup"])
            w.writerows(rows)


if __name__ == "__main__":
    main()

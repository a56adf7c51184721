"""Compare the compiled and numpy block-tridiagonal Cholesky kernels.

Usage: python benchmarks/bench_blocktri.py [--blocks 400] [--size 27] [--rhs 66]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from legcalib import blocktri


def make(N, n, seed=0):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(N, n, n))
    D = D @ D.transpose(0, 2, 1) + 4.0 * n * np.eye(n)
    S = rng.normal(size=(N - 1, n, n))
    return D, S


def run(factor, solve, D, S, B):
    N, n = D.shape[:2]
    Ld, Ls = np.zeros((N, n, n)), np.zeros((N - 1, n, n))
    factor(D, S, Ld, Ls)
    X = B.copy()
    solve(Ld, Ls, X)
    return X


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=400)
    ap.add_argument("--size", type=int, default=27)
    ap.add_argument("--rhs", type=int, default=66)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    D, S = make(args.blocks, args.size)
    B = np.random.default_rng(1).normal(size=(args.blocks, args.size, args.rhs))
    kernels = {"python": (blocktri._factor_py, blocktri._solve_py)}
    if blocktri._ext is not None:
        kernels["cython"] = (blocktri._ext.factor, blocktri._ext.solve)
    else:
        print("compiled kernel unavailable; timing the numpy path only")
    results = {}
    for name, (f, s) in kernels.items():
        t = min(timeit.repeat(lambda: run(f, s, D, S, B), number=1, repeat=args.repeat))
        results[name] = t
        print(f"{name:7s} {t * 1e3:9.2f} ms  (N={args.blocks}, n={args.size}, m={args.rhs})")
    if len(results) == 2:
        X0 = run(*kernels["python"], D, S, B)
        X1 = run(*kernels["cython"], D, S, B)
        print(f"speedup {results['python'] / results['cython']:.2f}x, "
              f"max abs diff {np.max(np.abs(X0 - X1)):.2e}")


if __name__ == "__main__":
    main()

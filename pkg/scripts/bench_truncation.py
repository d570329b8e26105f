#!/usr/bin/env python3
"""Timing trend of the two truncation operators versus the stored rank.

The SVD truncation costs O((n_x + n_xi + k) k'^2) and should scale roughly
4x when the stored rank k' doubles; the projection truncation costs
O(k' k (n_x + n_xi)) and should scale roughly 2x.  This is a loose trend
check, not a test: absolute numbers are machine-bound.
"""

import argparse
import time

import numpy as np

from sglowrank.lowrank import FactoredVector, truncate_projection, truncate_svd


def timeit(fn, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-x", type=int, default=16641)
    ap.add_argument("--n-xi", type=int, default=120)
    ap.add_argument("--rank", type=int, default=40)
    ap.add_argument("--stored", nargs="*", type=int, default=[80, 160, 320, 640])
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    basis, _ = np.linalg.qr(rng.standard_normal((args.n_xi, args.rank)))

    print(f"n_x={args.n_x} n_xi={args.n_xi} target rank={args.rank}")
    print(f"{'stored':>7} {'svd [s]':>10} {'ratio':>6} {'proj [s]':>10} {'ratio':>6}")
    prev = (None, None)
    for stored in args.stored:
        u = FactoredVector(
            rng.standard_normal((args.n_x, stored)), rng.standard_normal((args.n_xi, stored))
        )
        t_svd = timeit(lambda: truncate_svd(u, rank=args.rank))
        t_proj = timeit(lambda: truncate_projection(u, basis))
        r_svd = t_svd / prev[0] if prev[0] else float("nan")
        r_proj = t_proj / prev[1] if prev[1] else float("nan")
        print(f"{stored:>7} {t_svd:>10.4f} {r_svd:>6.2f} {t_proj:>10.4f} {r_proj:>6.2f}")
        prev = (t_svd, t_proj)


if __name__ == "__main__":
    main()

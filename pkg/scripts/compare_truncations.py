#!/usr/bin/env python3
"""Side-by-side comparison: multilevel truncation, SVD truncation, direct PGD.

All variants solve the identical problem with the identical seed; the SVD
variant reuses the rank identified by the coarse PGD stage.
"""

import argparse
from pathlib import Path

from sglowrank.cli import load_config, run_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", default="out/comparison")
    ap.add_argument(
        "--variants", default="lrp-multilevel,lrp-svd,pgd-direct",
        help="comma-separated subset of lrp-multilevel,lrp-svd,pgd-direct",
    )
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = run_comparison(cfg, variants, Path(args.out))
    width = max(len(v) for v in variants)
    print(f"{'variant':<{width}}  kappa  cycles  rel_residual  total_time")
    for row in rows:
        print(
            f"{row['variant']:<{width}}  {row.get('kappa', '-'):>5}  "
            f"{row.get('cycles', '-'):>6}  {row.get('rel_residual', float('nan')):>12.3e}  "
            f"{row['total_time']:>10.2f}"
        )


if __name__ == "__main__":
    main()

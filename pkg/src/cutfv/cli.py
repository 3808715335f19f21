"""Command-line entry point: `cutfv solve ...`."""
from __future__ import annotations

import argparse
import sys

from .harness import TestConfig, run_suite


def build_parser():
    p = argparse.ArgumentParser(
        prog="cutfv",
        description="Cut-cell finite volume solver for 2D elliptic "
                    "interface problems")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="run one study and write CSV tables")
    s.add_argument("--order", type=int, choices=(2, 4, 6), default=2,
                   help="order of accuracy P")
    s.add_argument("--n", type=int, default=64,
                   help="cells per side (power of two in [32, 256]); for "
                        "convergence/homogeneous-jump this is the finest level")
    s.add_argument("--geometry", choices=("ellipse", "cosine", "annulus"),
                   default="ellipse")
    s.add_argument("--test", choices=("convergence", "coeff-ratio",
                                      "solution-jump", "homogeneous-jump"),
                   default="convergence")
    s.add_argument("--beta-ratio", type=float, default=1.0,
                   help="beta-/beta+ scaling (fixed-ratio tests)")
    s.add_argument("--scale-ratio", type=float, default=1.0,
                   help="s-/s+ solution (or source) scaling")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", default="results", help="output directory")
    s.add_argument("--solver", choices=("bicgstab", "gmres", "direct"),
                   default="bicgstab")
    s.add_argument("--tol", type=float, default=1e-11,
                   help="relative residual tolerance")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "solve":
        cfg = TestConfig(order=args.order, n=args.n, geometry=args.geometry,
                         test=args.test, beta_ratio=args.beta_ratio,
                         scale_ratio=args.scale_ratio, seed=args.seed,
                         out=args.out, solver=args.solver, tol=args.tol)
        tab = run_suite(cfg)
        cols = [tab.xname] + list(tab.columns) + list(tab.rates)
        print(",".join(cols))
        for k in range(len(tab.xs)):
            row = [tab.xs[k]] + [tab.columns[c][k] for c in tab.columns] \
                + [tab.rates[c][k] for c in tab.rates]
            print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                           for v in row))
        print(f"tables written to {args.out}/", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Locate the voltage-collapse scale of a case by bracketing solve_pw verdicts.

    python3 scripts/collapse.py case9 --precision 1e-8
"""
import argparse
import time

from helmpw.cli import RunOptions, collapse_point
from helmpw.netmodel import load_case


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("case", nargs="?", default="case9")
    ap.add_argument("--precision", type=float, default=1e-8)
    ap.add_argument("--qlims", action="store_true")
    args = ap.parse_args()
    opts = RunOptions(case=args.case, enforce_qlims=args.qlims, precision=args.precision)
    t = time.perf_counter()
    r = collapse_point(load_case(args.case), opts)
    print(f"{args.case}: lambda_crit = {r.lam:.10f} +/- {r.window / 2:.1e}, bracket "
          f"[{r.lo:.10f}, {r.hi:.10f}], {r.solves} solves, {time.perf_counter() - t:.1f} s")


if __name__ == "__main__":
    main()

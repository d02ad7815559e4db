"""Write the per-stage convergence trace (stage, N, error) of one solve as CSV.

    python3 scripts/convergence_trace.py case9 --scale 2.485392 --out trace.csv
"""
import argparse
from pathlib import Path

from helmpw.diagnostics import convergence_trace, trace_csv
from helmpw.netmodel import load_case
from helmpw.pw import PWOptions, solve_pw


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("case", nargs="?", default="case9")
    ap.add_argument("--scale", type=float, default=2.485392)
    ap.add_argument("--tol", type=float, default=1e-12)
    ap.add_argument("--qlims", action="store_true")
    ap.add_argument("--out")
    args = ap.parse_args()
    sol = solve_pw(load_case(args.case).scaled(args.scale), PWOptions(tol=args.tol, full_orders=True),
                   limits=args.qlims)
    text = trace_csv(convergence_trace(sol.histories))
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    print(f"# converged={sol.converged} stages={sol.stages} mismatch={sol.mismatch:.2e}")


if __name__ == "__main__":
    main()

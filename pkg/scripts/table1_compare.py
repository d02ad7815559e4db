"""Saturation counts of HELM and both Newton switching strategies per fixture.

    python3 scripts/table1_compare.py [case ...] [--scale 1.0]
"""
import argparse
import time

from helmpw.cli import RunOptions, _marker, compare_row
from helmpw.netmodel import load_case

DEFAULT = ["case9", "case14", "case30", "case57", "case118", "case300"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("cases", nargs="*", default=DEFAULT)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    print(f"{'case':>10} {'PV':>5} {'HELM':>7} {'NR1':>7} {'NR2':>7} {'%PV':>6} {'P-W':>4} {'sec':>6}")
    for name in args.cases:
        t = time.perf_counter()
        row = compare_row(load_case(name).scaled(args.scale), RunOptions(case=name))
        m = row["methods"]
        h = m["helm"]
        cell = "NC" if h is None else f"{h['qmin']}/{h['qmax']}"
        print(f"{name:>10} {row['controls']:>5} {cell:>7} {_marker(h, m['nr1']):>7} "
              f"{_marker(h, m['nr2']):>7} {row.get('pv_saturated_pct', float('nan')):>6.1f} "
              f"{row.get('stages', '-'):>4} {time.perf_counter() - t:>6.1f}")


if __name__ == "__main__":
    main()

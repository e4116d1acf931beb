"""Side-by-side checkpoint comparison of finished runs.

    python3 scripts/checkpoint_report.py results/ml1m_full --at 50 --column rmse_unprotected
"""
import argparse
from pathlib import Path

from minifair.evaluation import read_trace_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("results", type=Path)
    ap.add_argument("--at", type=int, default=300)
    ap.add_argument("--column", default="rmse_all")
    args = ap.parse_args()

    rows = []
    for path in sorted(args.results.glob("*_seed*.csv")):
        trace = read_trace_csv(path)
        point = trace.at(args.at)
        value = getattr(point, args.column) if point else float("nan")
        rows.append((value, path.stem))
    for value, name in sorted(rows, key=lambda r: (r[0] != r[0], r[0])):
        print(f"{name:40s} {value:.4f}")


if __name__ == "__main__":
    main()

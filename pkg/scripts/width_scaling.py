"""Median final-session accuracy of the synthetic benchmark at several hidden widths.

    python3 scripts/width_scaling.py --widths 64 128 256 --seeds 10 --out width.csv
"""

import argparse
import csv

import numpy as np

from ntklab.experiments import run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--widths", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--out", default="width_scaling.csv")
    args = ap.parse_args()

    rows = []
    for width in args.widths:
        finals = []
        for seed in range(args.seeds):
            res = run_seed(seed, hidden=width)
            finals.append(res.final_accuracy)
            rows.append((width, seed, *res.report.accuracies))
        print(f"width {width:5d}: median final {np.median(finals):.4f}  mean {np.mean(finals):.4f}")

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["width", "seed", *(f"session{i}" for i in range(len(rows[0]) - 2))])
        w.writerows(rows)


if __name__ == "__main__":
    main()

"""Loss-term ablation on the synthetic benchmark (median over seeds of each session accuracy)."""

import argparse
import json
from dataclasses import replace

import numpy as np

from ntklab.experiments import STANDARD_TRAIN, run_seed

SETTINGS = {
    "full": {},
    "no-conv-reg": {"alpha": 0.0},
    "no-lin-reg": {"beta_hyper": 0.0},
    "no-reg": {"alpha": 0.0, "beta_hyper": 0.0},
    "no-adapt": {"gamma": 0.0},
    "margin-only": {"gamma": 0.0, "alpha": 0.0, "beta_hyper": 0.0},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--settings", nargs="+", default=list(SETTINGS), choices=list(SETTINGS))
    ap.add_argument("--out", default="ablation.json")
    args = ap.parse_args()

    summary = {}
    for name in args.settings:
        cfg = replace(STANDARD_TRAIN, **SETTINGS[name])
        accs = np.array([run_seed(s, cfg=cfg).report.accuracies for s in range(args.seeds)])
        med = np.median(accs, axis=0)
        summary[name] = {"median_sessions": med.tolist(), "median_pd": float(np.median(accs[:, 0] - accs[:, -1]))}
        print(f"{name:12s} " + " ".join(f"{a:.3f}" for a in med) + f"  PD {summary[name]['median_pd']:.3f}")

    with open(args.out, "w") as fh:
        json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()

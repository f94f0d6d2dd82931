#!/usr/bin/env python3
"""Aggregate the cached replicated experiment into quantile-fan data: per
sample size, the mean and the 5th/95th percentiles of the estimated quantile
function of the known factor, next to the true quantile function.

Writes one CSV per sample size (plot-ready, no plotting here).

Usage: python3 scripts/quantile_fan.py [--cache DIR] [--out DIR]
"""

import argparse
import csv
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from panellearn import GridMixture, mixture_quantile  # noqa: E402
from panellearn.harness import ExperimentConfig, load_replications  # noqa: E402
from panellearn.simulate import MixtureSpec  # noqa: E402

SEED = 20260810
SAMPLE_SIZES = (500, 1000, 2000, 4000)
REPLICATIONS = (50, 100, 50, 100)


def main() -> int:
    ap = argparse.ArgumentParser()
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    ap.add_argument("--cache", default=os.environ.get(
        "PANELLEARN_MC_DIR", os.path.join(root, ".mc_cache", "acceptance")))
    ap.add_argument("--out", default=os.path.join(root, "results"))
    args = ap.parse_args()
    cfg = ExperimentConfig(sample_sizes=SAMPLE_SIZES, replications=REPLICATIONS,
                           seed=SEED, out_dir=args.cache)
    records, _ = load_replications(cfg)
    os.makedirs(args.out, exist_ok=True)
    alphas = np.linspace(0.02, 0.98, 97)
    truth = MixtureSpec()
    q_true = np.array([truth.quantile(float(a)) for a in alphas])
    for n in SAMPLE_SIZES:
        recs = records.get(n, [])
        if not recs:
            print(f"n={n}: no cached replications, skipping")
            continue
        curves = np.empty((len(recs), alphas.size))
        for i, rec in enumerate(recs):
            mix = GridMixture(np.array(rec["mixture"]["support"]),
                              np.array(rec["mixture"]["weights"]))
            curves[i] = [mixture_quantile(mix, float(a)) for a in alphas]
        path = os.path.join(args.out, f"quantile_fan_n{n}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["alpha", "true", "mean", "p05", "p95"])
            for j, a in enumerate(alphas):
                writer.writerow([f"{a:.4f}", f"{q_true[j]:.6f}",
                                 f"{curves[:, j].mean():.6f}",
                                 f"{np.percentile(curves[:, j], 5):.6f}",
                                 f"{np.percentile(curves[:, j], 95):.6f}"])
        print(f"wrote {path} ({len(recs)} replications)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

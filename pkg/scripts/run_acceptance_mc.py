#!/usr/bin/env python3
"""Pre-generate (or resume) the replicated experiment behind acceptance
criteria 6-8, then print the aggregate tables.  Safe to interrupt and rerun:
finished replications are kept on disk.

Usage: python3 scripts/run_acceptance_mc.py [--threads N] [--out DIR]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from panellearn.harness import ExperimentConfig, mc_run, write_tables  # noqa: E402

SEED = 20260810
SAMPLE_SIZES = (500, 1000, 2000, 4000)
REPLICATIONS = (50, 100, 50, 100)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--threads", type=int,
                    default=int(os.environ.get("PANELLEARN_MC_THREADS", "2")))
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    ap.add_argument("--out", default=os.environ.get(
        "PANELLEARN_MC_DIR", os.path.join(root, ".mc_cache", "acceptance")))
    args = ap.parse_args()
    cfg = ExperimentConfig(sample_sizes=SAMPLE_SIZES, replications=REPLICATIONS,
                           seed=SEED, threads=args.threads, out_dir=args.out)

    def progress(done):
        n, rep, err = done
        print(f"  n={n} rep={rep} {'FAILED: ' + err if err else 'ok'}",
              flush=True)

    tables = mc_run(cfg, progress=progress)
    for path in write_tables(cfg, tables):
        print(f"wrote {path}")
    for n in SAMPLE_SIZES:
        su = tables["params"][n]["sigma2_u"]
        print(f"n={n}: Var(sigma2_u)x1000 = {su[1] * 1000:.2f}, "
              f"bias^2 x1000 = {su[0] * 1000:.3f}, "
              f"mean fit time {tables['timing'][n]:.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

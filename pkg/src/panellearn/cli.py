"""Command-line interface: simulate / estimate / mc / decompose / quantiles."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .estimator import FitConfig, fit
from .functionals import decompose_t, decompose_t1
from .harness import (ENV_PREFIX, load_experiment_config, load_fit_result,
                      mc_run, panel_from_csv, panel_to_csv, save_fit_result,
                      write_quantiles, write_tables)
from .simulate import DgpConfig, make_rng, simulate_panel, simulate_panel_crra


def _env_default(name: str, fallback, cast=int):
    raw = os.environ.get(ENV_PREFIX + name)
    return cast(raw) if raw is not None else fallback


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_env_default("SEED", 0))
    p.add_argument("--out", default=_env_default("OUT", None, cast=str))
    p.add_argument("--threads", type=int, default=_env_default("THREADS", 1))


def cmd_simulate(args) -> int:
    config = DgpConfig(seed=args.seed)
    rng = make_rng(args.seed, args.n)
    if args.crra:
        panel, _ = simulate_panel_crra(config.with_crra(), args.n, rng)
    else:
        panel, _ = simulate_panel(config, args.n, rng)
    out = args.out or "panel.csv"
    panel_to_csv(out, panel)
    print(f"wrote {out} (n={panel.n}, T={panel.T})")
    return 0


def cmd_estimate(args) -> int:
    panel = panel_from_csv(args.panel)
    cfg = FitConfig(seed=args.seed, tol=args.tol, max_iter=args.max_iter,
                    multistart=args.multistart)
    res = fit(panel, cfg)
    out = args.out or "fit.json"
    save_fit_result(out, res)
    qpath = args.quantiles_out or os.path.splitext(out)[0] + "_quantiles.csv"
    write_quantiles(qpath, res.mixture)
    print(f"loglik={res.loglik:.4f} converged={res.converged} "
          f"iters={res.iterations} wall={res.wall_time:.1f}s -> {out}, {qpath}")
    return 0


def cmd_mc(args) -> int:
    overrides = {"seed": args.seed if args.seed_given else None,
                 "threads": args.threads, "out_dir": args.out}
    if args.n:
        overrides["sample_sizes"] = args.n
    if args.reps:
        overrides["replications"] = args.reps
    config = load_experiment_config(args.config, overrides)

    def progress(done):
        n, rep, err = done
        status = f"FAILED: {err}" if err else "ok"
        print(f"  n={n} rep={rep} {status}", flush=True)

    tables = mc_run(config, progress=progress if args.verbose else None)
    paths = write_tables(config, tables)
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_decompose(args) -> int:
    if args.fit:
        res = load_fit_result(args.fit)
        outcome, choice, xk_dist = res.outcome, res.choice, res.mixture
    else:
        dgp = DgpConfig()
        outcome, choice, xk_dist = dgp.outcome, dgp.choice, dgp.xk
    path = tuple(int(c) for c in args.path)
    weights = (np.array([float(v) for v in args.weights.split(",")])
               if args.weights else args.discount ** np.arange(outcome.T))
    if args.t > 1:
        weights = weights.copy()
        weights[: args.t - 1] = 0.0
    from .functionals import WeightedSumSpec
    spec = WeightedSumSpec(weights, path)
    x = np.array([float(v) for v in args.x.split(",")])
    if args.t == 1:
        dec = decompose_t1(spec, outcome, xk_dist, x)
    else:
        rng = make_rng(args.seed, 777, args.t)
        dec = decompose_t(spec, args.t, args.which, outcome, choice, xk_dist,
                          x, mc_draws=args.mc_draws, rng=rng)
    payload = {"t": args.t, "which": args.which if args.t > 1 else "t1",
               "path": list(path), "weights": weights.tolist(),
               "v_unknown": dec.v_unknown, "v_known": dec.v_known,
               "total": dec.total, "method": dec.method, "mc_se": dec.mc_se}
    text = json.dumps(payload, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_quantiles(args) -> int:
    if args.fit:
        mixture = load_fit_result(args.fit).mixture
    else:
        raise SystemExit("quantiles requires --fit FIT_JSON")
    out = args.out or "quantiles.csv"
    alphas = np.linspace(args.alpha_min, args.alpha_max, args.alpha_count)
    write_quantiles(out, mixture, alphas)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panellearn",
        description="Simulate and estimate dynamic panel learning models; "
                    "compute variance-decomposition functionals.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="emit a simulated panel CSV")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--crra", action="store_true",
                   help="use the risk-averse choice process")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit one panel; emit JSON + quantile CSV")
    _add_common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--multistart", type=int, default=1)
    p.add_argument("--quantiles-out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("mc", help="replicated simulate+fit experiment")
    _add_common(p)
    p.add_argument("--config", default=None, help="YAML experiment file")
    p.add_argument("--n", type=int, nargs="*", default=None)
    p.add_argument("--reps", type=int, nargs="*", default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("decompose", help="variance decomposition at t")
    _add_common(p)
    p.add_argument("--fit", default=None, help="FitResult JSON (default: DGP truth)")
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--which", choices=["cond", "uncond", "counterfactual"],
                   default="cond")
    p.add_argument("--path", default="111", help="choice path, e.g. 112")
    p.add_argument("--weights", default=None, help="comma-separated weights")
    p.add_argument("--discount", type=float, default=0.95)
    p.add_argument("--x", default="1,0,0", help="conditioning covariate vector")
    p.add_argument("--mc-draws", type=int, default=100_000)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("quantiles", help="alpha-grid quantile curve of a fit")
    _add_common(p)
    p.add_argument("--fit", default=None)
    p.add_argument("--alpha-min", type=float, default=0.01)
    p.add_argument("--alpha-max", type=float, default=0.99)
    p.add_argument("--alpha-count", type=int, default=99)
    p.set_defaults(func=cmd_quantiles)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = ("--seed" in (argv if argv is not None else sys.argv))
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Experiment driver: panel/result serialization, configuration, and the
replicated simulate-fit-record Monte Carlo with bias/variance tables.
"""

from __future__ import annotations

import csv
import json
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .estimator import FitConfig, FitResult, fit, least_squares_start
from .functionals import (discounted_spec, mixture_moments, mixture_quantile,
                          posterior_variance)
from .model import ChoiceParams, OutcomeParams, PanelData, prior_state
from .npmle import GridMixture
from .packing import label
from .simulate import DgpConfig, make_rng, simulate_panel

ENV_PREFIX = "PANELLEARN_"
FLOAT_FMT = "%.17g"


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Panel CSV round trip
# ---------------------------------------------------------------------------

def panel_to_csv(path: str, panel: PanelData) -> None:
    """Columns: id, period, choice, y, x0..x{k-1}; '%.17g' floats, LF, UTF-8."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "period", "choice", "y"]
                        + [f"x{j}" for j in range(panel.k)])
        for i in range(panel.n):
            for t in range(panel.T):
                writer.writerow(
                    [i, t + 1, int(panel.d[i, t]), FLOAT_FMT % panel.y[i, t]]
                    + [FLOAT_FMT % v for v in panel.x[i, t]])


def panel_from_csv(path: str) -> PanelData:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = len(header) - 4
        rows = [(int(r[0]), int(r[1]), int(r[2]), float(r[3]),
                 [float(v) for v in r[4:]]) for r in reader]
    ids = sorted({r[0] for r in rows})
    T = max(r[1] for r in rows)
    idmap = {v: i for i, v in enumerate(ids)}
    y = np.empty((len(ids), T))
    d = np.empty((len(ids), T), dtype=np.int64)
    x = np.empty((len(ids), T, k))
    for rid, t, ch, yv, xv in rows:
        i = idmap[rid]
        y[i, t - 1] = yv
        d[i, t - 1] = ch
        x[i, t - 1] = xv
    return PanelData(y, d, x)


# ---------------------------------------------------------------------------
# FitResult JSON
# ---------------------------------------------------------------------------

def fit_result_to_dict(res: FitResult) -> dict:
    o = res.outcome
    return {
        "loglik": res.loglik,
        "gradient_norm": res.gradient_norm,
        "converged": bool(res.converged),
        "iterations": res.iterations,
        "wall_time": res.wall_time,
        "message": res.message,
        "outcome": {
            "beta": o.beta.tolist(),
            "lambda_k": o.lambda_k.tolist(),
            "lambda_u": o.lambda_u.tolist(),
            "sigma2": o.sigma2.tolist(),
            "sigma_u": o.sigma_u.tolist(),
            "pinned": sorted([list(p) for p in o.pinned]),
            "tie_sigma2": o.tie_sigma2,
        },
        "choice": {"rho": res.choice.rho, "kappa": res.choice.kappa,
                   "chi": res.choice.chi, "delta": res.choice.delta},
        "mixture": {"support": res.mixture.support.tolist(),
                    "weights": res.mixture.weights.tolist()},
    }


def fit_result_from_dict(payload: dict) -> FitResult:
    o = payload["outcome"]
    outcome = OutcomeParams(
        np.array(o["beta"]), np.array(o["lambda_k"]), np.array(o["lambda_u"]),
        np.array(o["sigma2"]), np.array(o["sigma_u"]),
        pinned=frozenset(tuple(p) for p in o["pinned"]),
        tie_sigma2=bool(o["tie_sigma2"]))
    c = payload["choice"]
    choice = ChoiceParams(rho=c["rho"], kappa=c["kappa"], chi=c.get("chi"),
                          delta=c.get("delta"))
    mixture = GridMixture(np.array(payload["mixture"]["support"]),
                          np.array(payload["mixture"]["weights"]))
    return FitResult(outcome=outcome, choice=choice, mixture=mixture,
                     loglik=payload["loglik"], gradient_norm=payload["gradient_norm"],
                     converged=payload["converged"], iterations=payload["iterations"],
                     wall_time=payload["wall_time"], message=payload.get("message", ""))


def save_fit_result(path: str, res: FitResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fit_result_to_dict(res), fh, indent=1)


def load_fit_result(path: str) -> FitResult:
    with open(path, encoding="utf-8") as fh:
        return fit_result_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

ALL_PATHS_3 = [(a, b, c) for a in (1, 2) for b in (1, 2) for c in (1, 2)]


@dataclass(frozen=True)
class ExperimentConfig:
    """Monte Carlo experiment: per sample size, simulate/fit `replications`
    panels and aggregate bias^2 and variance against the design truth."""

    sample_sizes: tuple = (250, 500, 1000, 2000, 4000)
    replications: tuple = (200,)          # broadcast over sample sizes
    seed: int = 20260810
    threads: int = 1
    out_dir: str = "mc_out"
    discount: float = 0.95
    functional_paths: tuple = tuple(ALL_PATHS_3)
    dgp: DgpConfig = field(default_factory=DgpConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    scale_1000: bool = True

    def __post_init__(self):
        reps = tuple(self.replications)
        if len(reps) == 1:
            reps = reps * len(self.sample_sizes)
        if len(reps) != len(self.sample_sizes):
            raise ValueError("replications must match sample_sizes (or be scalar)")
        if min(reps) < 1:
            raise ValueError("replications must be at least 1")
        object.__setattr__(self, "replications", reps)
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))


def load_experiment_config(path: str | None, overrides: dict | None = None
                           ) -> ExperimentConfig:
    """Read the YAML experiment file (documented in the README) and apply CLI
    and PANELLEARN_* environment overrides on top."""
    raw: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    env = {
        "seed": os.environ.get(ENV_PREFIX + "SEED"),
        "threads": os.environ.get(ENV_PREFIX + "THREADS"),
        "out_dir": os.environ.get(ENV_PREFIX + "OUT"),
    }
    for key, val in env.items():
        if val is not None:
            raw[key] = int(val) if key in ("seed", "threads") else val
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val
    fit_cfg = FitConfig(**raw.pop("fit", {}))
    dgp_kwargs = raw.pop("dgp", {})
    dgp = DgpConfig()
    if dgp_kwargs:
        choice = replace(dgp.choice, **{k: v for k, v in dgp_kwargs.items()
                                        if k in ("rho", "kappa", "chi", "delta")})
        dgp = replace(dgp, choice=choice)
    known = {"sample_sizes", "replications", "seed", "threads", "out_dir",
             "discount", "functional_paths", "scale_1000"}
    kwargs = {k: v for k, v in raw.items() if k in known}
    if "sample_sizes" in kwargs:
        kwargs["sample_sizes"] = tuple(kwargs["sample_sizes"])
    if "replications" in kwargs:
        reps = kwargs["replications"]
        kwargs["replications"] = tuple(reps) if isinstance(reps, (list, tuple)) else (reps,)
    if "functional_paths" in kwargs:
        kwargs["functional_paths"] = tuple(tuple(p) for p in kwargs["functional_paths"])
    return ExperimentConfig(dgp=dgp, fit=fit_cfg, **kwargs)


# ---------------------------------------------------------------------------
# Parameter recording
# ---------------------------------------------------------------------------

def recorded_estimates(outcome: OutcomeParams, choice: ChoiceParams,
                       mixture_var: float | None = None) -> dict[str, float]:
    """Flat name -> value map of the reported structural parameters."""
    out: dict[str, float] = {}
    T, D, k = outcome.T, outcome.D, outcome.k
    for t in range(1, T + 1):
        for d in range(1, D + 1):
            for j in range(k):
                key = ("beta", t, d, j)
                if key not in outcome.pinned:
                    out[label(key)] = float(outcome.beta[t - 1, d - 1, j])
            if ("lambda_k", t, d) not in outcome.pinned:
                out[label(("lambda_k", t, d))] = float(outcome.lambda_k[t - 1, d - 1])
            if ("lambda_u", t, d, 0) not in outcome.pinned:
                out[label(("lambda_u", t, d))] = float(outcome.lambda_u[t - 1, d - 1, 0])
    if outcome.tie_sigma2:
        for d in range(1, D + 1):
            out[f"sigma2_{d}"] = float(outcome.sigma2[0, d - 1])
    else:
        for t in range(1, T + 1):
            for d in range(1, D + 1):
                out[f"sigma2_{t}_{d}"] = float(outcome.sigma2[t - 1, d - 1])
    out["sigma2_u"] = float(outcome.sigma_u[0, 0])
    out["rho"] = float(choice.rho)
    out["kappa"] = float(choice.kappa)
    if mixture_var is not None:
        out["var_xk"] = mixture_var
    return out


def functional_estimates(outcome: OutcomeParams, var_xk: float, paths,
                         discount: float) -> dict[str, float]:
    """Plug-in discounted-sum variance components per choice path."""
    out: dict[str, float] = {}
    for path in paths:
        spec = discounted_spec(path, discount)
        v_u = posterior_variance(spec, prior_state(outcome), 1, outcome)
        lam_k = np.array([outcome.lambda_k[t, path[t] - 1] for t in range(outcome.T)])
        v_k = var_xk * float(spec.weights @ lam_k) ** 2
        tag = "".join(str(d) for d in path)
        out[f"Vu_{tag}"] = v_u
        out[f"Vk_{tag}"] = v_k
    return out


def true_values(config: ExperimentConfig) -> dict[str, float]:
    dgp = config.dgp
    _, var_xk = dgp.xk.moments()
    vals = recorded_estimates(dgp.outcome, dgp.choice, mixture_var=var_xk)
    vals.update(functional_estimates(dgp.outcome, var_xk,
                                     config.functional_paths, config.discount))
    return vals


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------

def _rep_path(out_dir: str, n: int, rep: int) -> str:
    return os.path.join(out_dir, "reps", f"n{n}_r{rep:04d}.json")


def run_replication(config: ExperimentConfig, n: int, rep: int) -> dict:
    """Simulate one panel with the per-(n, rep) stream, fit, and record.

    The start template inherits the experiment's model specification: the
    normalization pins (and their values) and the sigma2 tie, never the true
    free parameter values."""
    rng = make_rng(config.seed, n, rep)
    panel, _ = simulate_panel(config.dgp, n, rng)
    fit_cfg = replace(config.fit, seed=config.seed)
    truth = config.dgp.outcome
    start = least_squares_start(panel, pins=truth.pinned,
                                tie_sigma2=truth.tie_sigma2,
                                pin_source=truth)
    t0 = time.perf_counter()
    res = fit(panel, fit_cfg, start=start)
    wall = time.perf_counter() - t0
    _, var_xk = mixture_moments(res.mixture)
    est = recorded_estimates(res.outcome, res.choice, mixture_var=var_xk)
    est.update(functional_estimates(res.outcome, var_xk,
                                    config.functional_paths, config.discount))
    return {
        "n": n, "rep": rep, "wall_time": wall,
        "converged": bool(res.converged),
        "gradient_norm": res.gradient_norm,
        "loglik": res.loglik,
        "estimates": est,
        "mixture": {"support": res.mixture.support.tolist(),
                    "weights": res.mixture.weights.tolist()},
    }


def _worker(args) -> tuple[int, int, str]:
    config, n, rep = args
    path = _rep_path(config.out_dir, n, rep)
    try:
        record = run_replication(config, n, rep)
    except Exception as err:  # recorded and excluded at aggregation
        record = {"n": n, "rep": rep, "error": f"{type(err).__name__}: {err}"}
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(record, fh)
    os.replace(tmp, path)
    return n, rep, record.get("error", "")


def mc_run(config: ExperimentConfig, progress=None) -> dict:
    """Run (or resume) the full experiment; returns the aggregate tables.

    Per-replication records are JSON files under out_dir/reps keyed by
    (n, rep); existing files are reused, making the run resumable and
    parallel-safe.  More than 10% failed replications raises.
    """
    os.makedirs(os.path.join(config.out_dir, "reps"), exist_ok=True)
    todo = []
    for n, reps in zip(config.sample_sizes, config.replications):
        for r in range(reps):
            if not os.path.exists(_rep_path(config.out_dir, n, r)):
                todo.append((config, n, r))
    if todo:
        if config.threads > 1:
            # workers inherit a single-threaded BLAS so `threads` is the budget
            os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
            os.environ.setdefault("OMP_NUM_THREADS", "1")
            ctx = mp.get_context("spawn")
            with ctx.Pool(config.threads) as pool:
                for done in pool.imap_unordered(_worker, todo):
                    if progress:
                        progress(done)
        else:
            for args in todo:
                done = _worker(args)
                if progress:
                    progress(done)
    return aggregate(config)


def load_replications(config: ExperimentConfig) -> tuple[dict, dict]:
    """records[n] -> list of per-rep dicts; failures[n] -> count."""
    records: dict[int, list] = {}
    failures: dict[int, int] = {}
    for n, reps in zip(config.sample_sizes, config.replications):
        ok, bad = [], 0
        for r in range(reps):
            path = _rep_path(config.out_dir, n, r)
            if not os.path.exists(path):
                continue
            with open(path, encoding="utf-8") as fh:
                rec = json.load(fh)
            if "error" in rec:
                bad += 1
            else:
                ok.append(rec)
        records[n] = ok
        failures[n] = bad
    return records, failures


def aggregate(config: ExperimentConfig) -> dict:
    """Bias^2/variance tables for parameters and functionals, plus timing."""
    records, failures = load_replications(config)
    truth = true_values(config)
    total = {n: len(records[n]) + failures[n] for n in records}
    for n in records:
        if total[n] and failures[n] > 0.10 * total[n]:
            raise ExperimentError(
                f"{failures[n]}/{total[n]} replications failed at n={n}")
    param_names = [k for k in truth if not k.startswith(("Vk_", "Vu_", "var_xk"))]
    func_names = [k for k in truth if k.startswith(("Vk_", "Vu_"))]
    tables = {"params": {}, "functionals": {}, "timing": {}, "failures": failures}
    for n in config.sample_sizes:
        recs = records.get(n, [])
        if not recs:
            continue
        est = {k: np.array([r["estimates"][k] for r in recs]) for k in truth}

        def stat(k):
            bias = est[k].mean() - truth[k]
            var = float(est[k].var(ddof=1)) if est[k].size > 1 else float("nan")
            return float(bias ** 2), var

        stats_p = {k: stat(k) for k in param_names}
        stats_f = {k: stat(k) for k in func_names}
        tables["params"][n] = stats_p
        tables["functionals"][n] = stats_f
        tables["timing"][n] = float(np.mean([r["wall_time"] for r in recs]))
    tables["truth"] = truth
    return tables


def write_tables(config: ExperimentConfig, tables: dict) -> list[str]:
    """Emit the bias/variance and timing CSVs; returns the written paths."""
    out = []
    scale = 1000.0 if config.scale_1000 else 1.0
    tag = "_x1000" if config.scale_1000 else ""
    ns = [n for n in config.sample_sizes if n in tables["params"]]

    def emit(name: str, block: dict, scaled: bool) -> None:
        path = os.path.join(config.out_dir, name)
        names = list(next(iter(block.values())).keys()) if block else []
        s = scale if scaled else 1.0
        t = tag if scaled else ""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["parameter"]
                            + [f"{stat}{t}_n{n}" for n in ns
                               for stat in ("bias2", "var")])
            for pname in names:
                row = [pname]
                for n in ns:
                    b2, v = block[n][pname]
                    row += [FLOAT_FMT % (b2 * s), FLOAT_FMT % (v * s)]
                writer.writerow(row)
        out.append(path)

    emit("params_bias_var.csv", tables["params"], scaled=True)
    emit("functionals_bias_var.csv", tables["functionals"], scaled=False)
    timing_path = os.path.join(config.out_dir, "timing.csv")
    with open(timing_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "mean_seconds"])
        for n in ns:
            writer.writerow([n, FLOAT_FMT % tables["timing"][n]])
    out.append(timing_path)
    return out


def quantile_curve(mixture: GridMixture, alphas: np.ndarray) -> np.ndarray:
    return np.array([mixture_quantile(mixture, float(a)) for a in alphas])


def write_quantiles(path: str, mixture: GridMixture,
                    alphas: np.ndarray | None = None) -> None:
    alphas = alphas if alphas is not None else np.linspace(0.01, 0.99, 99)
    qs = quantile_curve(mixture, alphas)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "quantile"])
        for a, qv in zip(alphas, qs):
            writer.writerow([FLOAT_FMT % a, FLOAT_FMT % qv])

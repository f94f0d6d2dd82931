"""Grid construction, parameter packing under normalizations, and the outer
quasi-Newton maximization defining the sieve MLE.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .likelihood import LikelihoodEngine, LikelihoodMatrix
from .model import ChoiceParams, InvalidStateError, OutcomeParams, PanelData
from .npmle import GridMixture, solve_weights
from .packing import ParamPacker
from .profile import _responsibilities


class OptimizationFailureError(RuntimeError):
    pass


DEFAULT_PINS = frozenset({("beta", 1, 1, 0), ("lambda_u", 1, 1, 0), ("lambda_k", 1, 2)})


def build_grid(n: int) -> np.ndarray:
    """Uniform sieve grid: ceil(6 n^(1/3)) points on +-0.7 n^(1/6).

    The small epsilon absorbs floating-point noise in the cube root so that
    perfect cubes (6 * 8000^(1/3) = 120) do not round up an extra point.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    q = int(np.ceil(6.0 * n ** (1.0 / 3.0) - 1e-9))
    bound = 0.7 * n ** (1.0 / 6.0)
    return np.linspace(-bound, bound, q)


def pack(outcome: OutcomeParams, choice: ChoiceParams, **packer_opts) -> np.ndarray:
    return ParamPacker(outcome, choice, **packer_opts).pack(outcome, choice)


def unpack(x: np.ndarray, template_outcome: OutcomeParams,
           template_choice: ChoiceParams, **packer_opts) -> tuple[OutcomeParams, ChoiceParams]:
    return ParamPacker(template_outcome, template_choice, **packer_opts).unpack(x)


@dataclass(frozen=True)
class FitConfig:
    """Outer-loop configuration.

    grid overrides the default support; tol is the sup-norm tolerance on the
    per-observation (mean log-likelihood) gradient, so it is sample-size
    invariant; multistart > 1 perturbs the packed start vector by
    perturb * N(0,1) using streams derived from seed.
    """

    grid: np.ndarray | None = None
    tol: float = 1e-6
    max_iter: int = 500
    multistart: int = 1
    perturb: float = 0.5
    seed: int = 0
    fix_rho: bool = False
    fix_kappa: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class FitResult:
    outcome: OutcomeParams
    choice: ChoiceParams
    mixture: GridMixture
    loglik: float               # raw sum scale
    gradient_norm: float        # mean-scale sup norm
    converged: bool
    iterations: int
    wall_time: float
    message: str = ""


def least_squares_start(data: PanelData, pins: frozenset = DEFAULT_PINS,
                        tie_sigma2: bool = True, D: int | None = None,
                        pin_source: OutcomeParams | None = None
                        ) -> tuple[OutcomeParams, ChoiceParams]:
    """Truth-agnostic start: per-(t,d) OLS for beta on the chosen subsamples,
    residual variances split across the three noise sources, loadings at their
    normalization-consistent defaults, rho = 1, kappa = 0.

    Pinned entries default to 0 (intercepts) and 1 (loadings); pin_source
    supplies the pinned values instead when the model's normalization fixes
    them elsewhere (pins are part of the model specification, never data)."""
    T, k = data.T, data.k
    D = D or int(data.d.max())
    beta = np.zeros((T, D, k))
    resvar = np.ones((T, D))
    for t in range(T):
        for d in range(D):
            rows = np.flatnonzero(data.d[:, t] == d + 1)
            if rows.size < k + 2:
                rows = np.arange(data.n)
            X = data.x[rows, t]
            yv = data.y[rows, t]
            coef, *_ = np.linalg.lstsq(X, yv, rcond=None)
            beta[t, d] = coef
            resid = yv - X @ coef
            resvar[t, d] = max(float(resid.var()), 1e-8)
    lam_k = np.ones((T, D))
    lam_u = np.ones((T, D, 1))
    for key in pins:
        kind = key[0]
        if kind == "beta":
            _, t, d, j = key
            beta[t - 1, d - 1, j] = (0.0 if pin_source is None
                                     else pin_source.beta[t - 1, d - 1, j])
        elif kind == "lambda_k":
            _, t, d = key
            lam_k[t - 1, d - 1] = (1.0 if pin_source is None
                                   else pin_source.lambda_k[t - 1, d - 1])
        elif kind == "lambda_u":
            _, t, d, j = key
            lam_u[t - 1, d - 1, j] = (1.0 if pin_source is None
                                      else pin_source.lambda_u[t - 1, d - 1, j])
    sigma2 = np.maximum(resvar / 3.0, 1e-9)
    if tie_sigma2:
        sigma2 = np.tile(sigma2.mean(axis=0, keepdims=True), (T, 1))
    sigma_u = np.array([[max(float(resvar.mean()) / 3.0, 1e-9)]])
    outcome = OutcomeParams(beta, lam_k, lam_u, sigma2, sigma_u,
                            pinned=pins, tie_sigma2=tie_sigma2)
    return outcome, ChoiceParams(rho=1.0, kappa=0.0)


class _Objective:
    """Mean profile log-likelihood and gradient, with inner warm starting."""

    def __init__(self, data: PanelData, support: np.ndarray, packer: ParamPacker):
        self.data = data
        self.support = support
        self.packer = packer
        self.omega: np.ndarray | None = None
        self.certified = True
        self._last: tuple | None = None

    def value(self, x: np.ndarray) -> tuple[float, LikelihoodEngine, LikelihoodMatrix, object]:
        outcome, choice = self.packer.unpack(x)
        engine = LikelihoodEngine(self.data, self.support, outcome, choice)
        L = LikelihoodMatrix.from_raw(engine.raw_matrix())
        inner = solve_weights(L, warm_start=self.omega)
        f = inner.objective / self.data.n
        self._last = (x.tobytes(), f, engine, L, inner)
        return f, engine, L, inner

    def value_and_grad(self, x: np.ndarray):
        # the accepted line-search point was just evaluated with the same warm
        # start, so its inner solution can be reused bit-for-bit
        if self._last is not None and self._last[0] == x.tobytes():
            _, f, engine, L, inner = self._last
        else:
            f, engine, L, inner = self.value(x)
        self.omega = inner.weights
        self.certified = inner.certified
        outcome, choice = self.packer.unpack(x)
        R = _responsibilities(L, inner.weights)
        g_full = engine.contract_gradient(R)
        g = self.packer.gradient_to_free(g_full, outcome, choice) / self.data.n
        return f, g, inner


def _bfgs_maximize(obj: _Objective, x0: np.ndarray, tol: float, max_iter: int,
                   trace: list | None = None
                   ) -> tuple[np.ndarray, float, np.ndarray, object, int, bool, str]:
    """BFGS with Armijo backtracking; accepted steps never decrease the value."""
    x = x0.copy()
    f, g, inner = obj.value_and_grad(x)
    if trace is not None:
        trace.append(f)
    H = np.eye(x.size)
    c1 = 1e-4
    it = 0
    msg = ""
    while it < max_iter:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol:
            return x, f, g, inner, it, True, "gradient tolerance reached"
        p = H @ g
        slope = float(g @ p)
        if not np.isfinite(slope) or slope <= 0:
            H = np.eye(x.size)
            p = g.copy()
            slope = float(g @ g)
        alpha = 1.0
        accepted = False
        for _ in range(45):
            x_new = x + alpha * p
            try:
                f_new, engine, L, inner_new = obj.value(x_new)
            except (np.linalg.LinAlgError, FloatingPointError, OverflowError,
                    InvalidStateError):
                f_new = -np.inf
            if np.isfinite(f_new) and f_new >= f + c1 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if it == 0:
                raise OptimizationFailureError(
                    f"line search failed at the start (|g|={gnorm:.3e}, f={f:.6f})")
            msg = "line search stalled"
            break
        f_new, g_new, inner = obj.value_and_grad(x_new)
        if trace is not None:
            trace.append(f_new)
        s = x_new - x
        yv = -(g_new - g)          # gradient of the negated objective
        sy = float(s @ yv)
        if sy > 1e-10 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            rho_bfgs = 1.0 / sy
            I = np.eye(x.size)
            V = I - rho_bfgs * np.outer(s, yv)
            H = V @ H @ V.T + rho_bfgs * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        it += 1
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm <= tol
    return x, f, g, inner, it, converged, msg or "iteration limit reached"


def fit(data: PanelData, config: FitConfig,
        start: tuple[OutcomeParams, ChoiceParams] | None = None) -> FitResult:
    """Sieve MLE: profile out the mixing weights, BFGS over the free
    structural coordinates, best run across multistarts."""
    t0 = time.perf_counter()
    if start is None:
        start = least_squares_start(data)
    outcome0, choice0 = start
    if outcome0.p != 1:
        raise NotImplementedError("fit supports p = 1 models")
    if data.T < 2 * outcome0.p + 1:
        warnings.warn(f"horizon T={data.T} is below the recommended 2p+1",
                      UserWarning)
    support = config.grid if config.grid is not None else build_grid(data.n)
    support = np.asarray(support, dtype=float)
    packer = ParamPacker(outcome0, choice0, fix_rho=config.fix_rho,
                         fix_kappa=config.fix_kappa)
    x0 = packer.pack(outcome0, choice0)

    runs = []
    failures = []
    for m in range(max(1, config.multistart)):
        xs = x0.copy()
        if m > 0:
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(1000 + m,))))
            xs = x0 + config.perturb * rng.standard_normal(x0.size)
        obj = _Objective(data, support, packer)
        try:
            runs.append(_bfgs_maximize(obj, xs, config.tol, config.max_iter))
        except OptimizationFailureError as err:
            failures.append(str(err))
    if not runs:
        raise OptimizationFailureError(
            "all starts failed the initial line search: " + "; ".join(failures))

    certified = [r for r in runs if getattr(r[3], "certified", False)]
    pool = certified or runs
    best = max(pool, key=lambda r: r[1])
    x, f, g, inner, it, converged, msg = best
    outcome, choice = packer.unpack(x)
    mixture = GridMixture(support, inner.weights)
    return FitResult(
        outcome=outcome, choice=choice, mixture=mixture,
        loglik=f * data.n, gradient_norm=float(np.max(np.abs(g))),
        converged=converged, iterations=it,
        wall_time=time.perf_counter() - t0, message=msg,
    )

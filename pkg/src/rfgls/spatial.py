"""Kriging, latent-surface recovery, residual ML estimation and the two-stage pipeline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .cholfactor import nngp_factor, order_locations
from .covmodel import CovarianceSpec, matern_cov, pairwise_distances
from .data import SpatialDataset
from .forest import ForestModel, ForestParams, fit_forest, predict_forest

__all__ = [
    "FitReport",
    "KrigingContext",
    "PipelineResult",
    "EstimationError",
    "NLL_SENTINEL",
    "DEFAULT_BOUNDS",
    "neg_log_likelihood",
    "estimate_params",
    "default_init",
    "build_kriging_context",
    "kriging_correction",
    "krige_predict",
    "recover_latent",
    "fit_pipeline",
]

logger = logging.getLogger(__name__)

NLL_SENTINEL = 1e300
DEFAULT_BOUNDS = (1e-6, 1e4)
DENSE_MAX_N = 5000
NM_FATOL = 1e-8
NM_MAXITER = 500


class EstimationError(RuntimeError):
    """Covariance parameters cannot be estimated from the given residuals."""


@dataclass(frozen=True)
class FitReport:
    spec_hat: CovarianceSpec
    nll: float
    iterations: int
    converged: bool

    def to_json(self) -> dict:
        return {
            "sigma2": self.spec_hat.sigma2,
            "phi": self.spec_hat.phi,
            "tau2": self.spec_hat.tau2,
            "nll": self.nll,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _check_dense(n: int) -> None:
    if n > DENSE_MAX_N:
        raise ValueError(f"dense covariance limited to n <= {DENSE_MAX_N} (got {n})")


def _gp_cov(dist: np.ndarray, spec: CovarianceSpec) -> np.ndarray:
    if spec.sigma2 == 0:
        return np.zeros_like(dist)
    return matern_cov(dist, spec)


def _nll_dist(dist: np.ndarray, r: np.ndarray, spec: CovarianceSpec) -> float:
    cov = _gp_cov(dist, spec)
    cov[np.diag_indices_from(cov)] += spec.tau2
    try:
        cf = linalg.cho_factor(cov, lower=True, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return NLL_SENTINEL
    diag = np.diag(cf[0])
    if not np.all(diag > 0):
        return NLL_SENTINEL
    quad = float(r @ linalg.cho_solve(cf, r, check_finite=False))
    val = 0.5 * (2.0 * np.sum(np.log(diag)) + quad + r.size * math.log(2 * math.pi))
    return val if math.isfinite(val) else NLL_SENTINEL


def neg_log_likelihood(spec: CovarianceSpec, r, locations) -> float:
    """Gaussian negative log-likelihood of residuals ``r`` under ``spec``.

    A covariance that is not positive definite yields :data:`NLL_SENTINEL`.
    """
    r = np.asarray(r, dtype=float).ravel()
    _check_dense(r.size)
    dist = pairwise_distances(locations)
    if dist.shape[0] != r.size:
        raise ValueError("residuals and locations differ in length")
    val = _nll_dist(dist, r, spec)
    if val == NLL_SENTINEL:
        logger.debug("covariance not positive definite at %s", spec)
    return val


def _reflect(z: np.ndarray, lo: float, hi: float) -> np.ndarray:
    w = hi - lo
    t = np.mod(z - lo, 2 * w)
    return lo + np.where(t <= w, t, 2 * w - t)


def default_init(r, locations, kind: str = "exponential", nu: float = 0.5) -> CovarianceSpec:
    """Half the residual variance each to GP and nugget; correlation 0.05 at half the diameter."""
    r = np.asarray(r, dtype=float)
    var = float(np.var(r))
    dmax = float(pairwise_distances(locations).max())
    phi = 3.0 / (math.sqrt(2) * max(dmax, 1e-12) / 2)
    return CovarianceSpec(kind=kind, sigma2=var / 2, phi=phi, nu=nu, tau2=var / 2)


def estimate_params(r, locations, init: CovarianceSpec | None = None,
                    bounds: tuple[float, float] = DEFAULT_BOUNDS) -> FitReport:
    """ML estimate of ``(sigma2, phi, tau2)`` with ``nu`` held at ``init.nu``.

    Nelder-Mead on the logs, stopping when the simplex values spread less
    than 1e-8 or after 500 iterations.  Box bounds are enforced by
    reflecting the log parameters into ``[log lo, log hi]``.
    """
    r = np.asarray(r, dtype=float).ravel()
    n = r.size
    if n < 10:
        raise EstimationError(f"need at least 10 residuals (got {n})")
    _check_dense(n)
    if np.ptp(r) == 0:
        raise EstimationError("residuals are constant")
    dist = pairwise_distances(locations)
    if dist.shape[0] != n:
        raise ValueError("residuals and locations differ in length")
    if init is None:
        init = default_init(r, locations)
    if init.kind not in ("exponential", "matern"):
        raise ValueError("estimation supports the exponential and matern kinds")
    lo, hi = bounds
    theta0 = np.array([init.sigma2, init.phi, init.tau2])
    if not np.all((theta0 >= lo) & (theta0 <= hi)):
        raise ValueError(f"initial parameters {theta0} outside bounds {bounds}")
    llo, lhi = math.log(lo), math.log(hi)

    def spec_of(z):
        s2, phi, t2 = np.exp(_reflect(np.asarray(z, dtype=float), llo, lhi))
        return init.replace(sigma2=float(s2), phi=float(phi), tau2=float(t2))

    def objective(z):
        return _nll_dist(dist, r, spec_of(z))

    res = optimize.minimize(
        objective,
        np.log(theta0),
        method="Nelder-Mead",
        options={"fatol": NM_FATOL, "xatol": np.inf, "maxiter": NM_MAXITER, "maxfev": 10 * NM_MAXITER},
    )
    spec_hat = spec_of(res.x)
    nll = float(res.fun)
    converged = bool(res.nit < NM_MAXITER and nll < NLL_SENTINEL)
    return FitReport(spec_hat, nll, int(res.nit), converged)


@dataclass(frozen=True, eq=False)
class KrigingContext:
    """Training side of the kriging predictor: locations, working spec, residuals and ``Sigma^{-1} r``."""

    train_locations: np.ndarray
    spec: CovarianceSpec
    residuals: np.ndarray
    solved: np.ndarray = field(repr=False)


def build_kriging_context(locations, spec: CovarianceSpec, residuals) -> KrigingContext:
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    r = np.asarray(residuals, dtype=float).ravel()
    if loc.shape[0] != r.size:
        raise ValueError("residuals and locations differ in length")
    if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(r))):
        raise ValueError("kriging inputs must be finite")
    _check_dense(r.size)
    cov = _gp_cov(pairwise_distances(loc), spec)
    cov[np.diag_indices_from(cov)] += spec.tau2
    try:
        cf = linalg.cho_factor(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise ValueError("working covariance is not positive definite (duplicate locations with tau2=0?)") from None
    return KrigingContext(loc, spec, r, linalg.cho_solve(cf, r, check_finite=False))


def kriging_correction(ctx: KrigingContext, new_locations) -> np.ndarray:
    """``v^T Sigma^{-1} (Y - m_hat)`` at each new location; ``v`` omits the nugget."""
    loc = np.asarray(new_locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None] if ctx.train_locations.shape[1] == 1 else loc[None, :]
    if not np.all(np.isfinite(loc)):
        raise ValueError("new locations must be finite")
    v = _gp_cov(pairwise_distances(loc, ctx.train_locations), ctx.spec)
    return v @ ctx.solved


def krige_predict(forest: ForestModel, ctx: KrigingContext, X_new, new_locations) -> np.ndarray:
    """Mean-function prediction plus the kriging correction of the residual field."""
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if not np.all(np.isfinite(X_new)):
        raise ValueError("covariates must be finite")
    corr = kriging_correction(ctx, new_locations)
    if corr.size != X_new.shape[0]:
        raise ValueError("X_new and new_locations differ in length")
    return predict_forest(forest, X_new) + corr


def recover_latent(ctx: KrigingContext) -> np.ndarray:
    """Conditional mean ``C Sigma^{-1} (Y - m_hat)`` of the latent GP at the training locations."""
    C = _gp_cov(pairwise_distances(ctx.train_locations), ctx.spec)
    return C @ ctx.solved


@dataclass(eq=False)
class PipelineResult:
    forest: ForestModel
    report: FitReport
    context: KrigingContext
    stage1_forest: ForestModel
    stage1_residuals: np.ndarray
    order: np.ndarray  # row order the RF-GLS forest was trained on


def fit_pipeline(data: SpatialDataset, params: ForestParams, stage1: ForestParams | None = None,
                 bounds: tuple[float, float] = DEFAULT_BOUNDS, n_neighbors: int = 20,
                 oracle_spec: CovarianceSpec | None = None, stage1_forest: ForestModel | None = None,
                 init: CovarianceSpec | None = None, stage2_report: FitReport | None = None,
                 n_jobs: int = 1) -> PipelineResult:
    """Feasible RF-GLS.

    1. plain RF (identity factor) with ``stage1`` params, skipped when
       ``stage1_forest`` is given;
    2. ML estimate of the covariance from its in-sample residuals, skipped
       when ``oracle_spec`` is given (``stage2_report`` reuses an estimate
       already computed from the same residuals);
    3. NNGP factor on the location-ordered data and the RF-GLS fit.

    The kriging context uses the working spec and the RF-GLS residuals.
    """
    if data.locations is None:
        raise ValueError("the pipeline needs locations")
    stage1 = params if stage1 is None else stage1
    if stage1_forest is None:
        stage1_forest = fit_forest(data, None, stage1, n_jobs=n_jobs)
    resid1 = data.y - predict_forest(stage1_forest, data.X)
    if oracle_spec is None and stage2_report is not None:
        report = stage2_report
    elif oracle_spec is None:
        report = estimate_params(resid1, data.locations, init=init, bounds=bounds)
    else:
        report = FitReport(oracle_spec, neg_log_likelihood(oracle_spec, resid1, data.locations), 0, True)
    spec = report.spec_hat
    order = order_locations(data.locations)
    ordered = data.subset(order)
    q = min(n_neighbors, data.n - 1)
    factor = nngp_factor(ordered.locations, spec, q)
    if factor.jittered:
        logger.warning("NNGP factor needed jitter for spec %s", spec)
    forest = fit_forest(ordered, factor, params, n_jobs=n_jobs)
    resid = data.y - predict_forest(forest, data.X)
    ctx = build_kriging_context(data.locations, spec, resid)
    return PipelineResult(forest, report, ctx, stage1_forest, resid1, order)

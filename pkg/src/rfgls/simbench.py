"""Simulation harness: mean functions, GP draws, holdout design, metrics and experiment runs."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .cholfactor import identity_factor, nngp_factor, resampled_precision
from .covmodel import CovarianceSpec, matern_cov, pairwise_distances
from .data import SpatialDataset
from .forest import ForestParams, fit_forest, predict_forest
from .glstree import Membership, grow_tree, split_profile
from .spatial import build_kriging_context, estimate_params, fit_pipeline, kriging_correction

__all__ = [
    "MeanFunction",
    "eval_mean",
    "fixed_surface",
    "sample_gp",
    "ExperimentConfig",
    "gen_dataset",
    "spatial_holdout",
    "latin_hypercube",
    "evaluation_points",
    "mise",
    "relative_mse",
    "ResultRecord",
    "METHODS",
    "run_experiment",
    "phi_for_range",
    "PHI_GRID",
    "SIGMA2_GRID",
    "TAU2_FRAC_GRID",
    "Figure2Result",
    "figure2_experiment",
    "GenerationError",
]

logger = logging.getLogger(__name__)

METHODS = ("RF", "RF-RK", "RF-GLS", "RF-GLS-oracle")
MEAN_DIMS = {"m1": 1, "m2": 5, "m3": 15, "step": 1}


def phi_for_range(frac: float) -> float:
    """Decay at which the exponential correlation is about 0.05 at ``frac`` of the unit-square diameter."""
    return 3.0 / (frac * math.sqrt(2))


SIGMA2_GRID = (1.0, 5.0, 10.0)
PHI_GRID = tuple(phi_for_range(f) for f in (0.25, 0.5, 0.75))
TAU2_FRAC_GRID = (0.01, 0.1, 0.25)


class GenerationError(RuntimeError):
    """Simulation input could not be generated."""


# ---------------------------------------------------------------------------
# mean functions


@dataclass(frozen=True)
class MeanFunction:
    """``kind`` in m1, m2, m3, step or custom (``func`` maps an ``(n, D)`` array to ``n`` values)."""

    kind: str = "m1"
    dim: int | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "custom":
            if self.func is None or self.dim is None or self.dim < 1:
                raise ValueError("custom mean functions need func and dim")
        elif self.kind in MEAN_DIMS:
            if self.dim not in (None, MEAN_DIMS[self.kind]):
                raise ValueError(f"{self.kind} has dimension {MEAN_DIMS[self.kind]}")
            object.__setattr__(self, "dim", MEAN_DIMS[self.kind])
        else:
            raise ValueError(f"unknown mean function {self.kind!r}")

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.dim == 1 else X[None, :]
        if X.shape[1] != self.dim:
            raise ValueError(f"{self.kind} expects {self.dim} covariates, got {X.shape[1]}")
        return _MEANS[self.kind](X) if self.kind != "custom" else np.asarray(self.func(X), dtype=float)


def _m1(X):
    return 10 * np.sin(np.pi * X[:, 0])


def _friedman(X):
    return 10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2 + 10 * X[:, 3] + 5 * X[:, 4]


def _m2(X):
    return _friedman(X) / 6


def _m3(X):
    x = X.T
    s = (
        _friedman(X)
        + 3 / ((x[5] + 1) * (x[6] + 1))
        + 4 * np.exp(x[7] ** 2)
        + 30 * x[8] ** 2 * x[9]
        + 5 * (np.exp(x[10] ** 2) * np.sin(np.pi * x[11]) + np.exp(x[11] ** 2) * np.sin(np.pi * x[10]))
        + 10 * x[12] ** 2 * np.cos(np.pi * x[13])
        + 20 * x[14] ** 4
    )
    return s / 6


def _step(X):
    return np.where(X[:, 0] <= 0.5, 1.0, 1.5)


_MEANS = {"m1": _m1, "m2": _m2, "m3": _m3, "step": _step}


def eval_mean(f: MeanFunction, x) -> float:
    """``f`` at a single covariate vector."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.size != f.dim:
        raise ValueError(f"{f.kind} expects a vector of length {f.dim}")
    return float(f(x[None, :])[0])


# ---------------------------------------------------------------------------
# spatial effects

# two-component bivariate normal mixtures: (mu1, var1, mu2, var2), isotropic
SURFACES = {
    1: ((0.25, 0.5), 0.0025, (0.75, 0.5), 0.0025),
    2: ((0.25, 0.5), 0.01, (0.75, 0.5), 0.0025),
    3: ((0.25, 0.25), 0.0025, (0.6, 0.9), 0.0025),
}


def fixed_surface(locations, setup: int, sigma2: float) -> np.ndarray:
    """Equal-weight mixture density at ``locations``, centered and rescaled to sample variance ``sigma2``."""
    if setup not in SURFACES:
        raise ValueError(f"surface setup must be one of {sorted(SURFACES)}")
    loc = np.asarray(locations, dtype=float)
    mu1, v1, mu2, v2 = SURFACES[setup]
    dens = np.zeros(len(loc))
    for mu, v in ((mu1, v1), (mu2, v2)):
        d2 = ((loc - np.asarray(mu)) ** 2).sum(axis=1)
        dens += 0.5 * np.exp(-0.5 * d2 / v) / (2 * np.pi * v)
    dens -= dens.mean()
    sd = dens.std(ddof=1) if len(loc) > 1 else 0.0
    if sd == 0:
        return dens
    return dens * math.sqrt(sigma2) / sd


def sample_gp(locations, spec: CovarianceSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw the GP part ``w ~ N(0, C)`` (nugget excluded) by dense Cholesky."""
    loc = np.asarray(locations, dtype=float)
    n = len(loc)
    if n > 5000:
        raise GenerationError("dense GP sampling limited to n <= 5000")
    z = rng.standard_normal(n)
    if spec.sigma2 == 0:
        return np.zeros(n)
    C = matern_cov(pairwise_distances(loc), spec)
    try:
        L = linalg.cholesky(C, lower=True, check_finite=False)
    except linalg.LinAlgError:
        C[np.diag_indices_from(C)] += 1e-10 * spec.sigma2
        try:
            L = linalg.cholesky(C, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise GenerationError("GP covariance is not positive semidefinite") from None
    return L @ z


# ---------------------------------------------------------------------------
# configuration and data


@dataclass(frozen=True)
class ExperimentConfig:
    mean_kind: str = "m1"
    n: int = 250
    sigma2: float = 10.0
    phi: float = PHI_GRID[1]
    tau2_frac: float = 0.1
    replicates: int = 100
    forest: ForestParams = ForestParams()
    eval_points: int = 1000
    holdout: str = "boxes"
    seed: int = 0
    n_neighbors: int = 20
    nu: float = 0.5  # smoothness of the generating GP; the working model stays exponential
    surface: int | None = None  # fixed mixture surface instead of a GP
    nugget: float | None = None  # absolute tau2, overriding tau2_frac * sigma2
    methods: tuple[str, ...] = METHODS

    def __post_init__(self):
        if self.mean_kind not in MEAN_DIMS:
            raise ValueError(f"mean_kind must be one of {sorted(MEAN_DIMS)}")
        if self.n < 2 or self.replicates < 0 or self.eval_points < 1:
            raise ValueError("need n >= 2, replicates >= 0 and eval_points >= 1")
        if self.sigma2 < 0 or self.tau2_frac < 0 or self.phi <= 0:
            raise ValueError("need sigma2 >= 0, tau2_frac >= 0 and phi > 0")
        if self.nugget is not None and self.nugget < 0:
            raise ValueError("nugget must be nonnegative")
        if self.holdout not in ("boxes", "none"):
            raise ValueError("holdout must be 'boxes' or 'none'")
        object.__setattr__(self, "methods", tuple(self.methods))
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.surface is not None and "RF-GLS-oracle" in self.methods:
            raise ValueError("the oracle method needs a GP spatial effect")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned value")

    @property
    def tau2(self) -> float:
        return self.tau2_frac * self.sigma2 if self.nugget is None else self.nugget

    @property
    def mean(self) -> MeanFunction:
        return MeanFunction(self.mean_kind)

    @property
    def true_spec(self) -> CovarianceSpec:
        kind = "exponential" if self.nu == 0.5 else "matern"
        return CovarianceSpec(kind=kind, sigma2=self.sigma2, phi=self.phi, nu=self.nu, tau2=self.tau2)


def gen_dataset(cfg: ExperimentConfig, rng: np.random.Generator, locations=None) -> SpatialDataset:
    """``Y = m(X) + w(l) + eps``; locations uniform on the unit square unless given."""
    n = cfg.n
    loc = rng.random((n, 2)) if locations is None else np.asarray(locations, dtype=float)
    if len(loc) != n:
        raise ValueError("locations must have cfg.n rows")
    X = rng.random((n, cfg.mean.dim))
    if cfg.surface is None:
        w = sample_gp(loc, cfg.true_spec, rng)
    else:
        w = fixed_surface(loc, cfg.surface, cfg.sigma2)
    eps = math.sqrt(cfg.tau2) * rng.standard_normal(n)
    return SpatialDataset(cfg.mean(X) + w + eps, X, loc)


def spatial_holdout(data: SpatialDataset, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Test set = points in 10 of the 10x10 unit-square boxes, one per row and per column."""
    loc = data.locations
    if loc is None or loc.shape[1] != 2:
        raise ValueError("spatial holdout needs 2-D locations")
    if np.any(loc < 0) or np.any(loc > 1):
        raise ValueError("locations must lie in the unit square")
    col = np.minimum((loc[:, 0] * 10).astype(int), 9)
    row = np.minimum((loc[:, 1] * 10).astype(int), 9)
    for _ in range(2):
        perm = rng.permutation(10)  # row r pairs with column perm[r]
        test_mask = perm[row] == col
        if not test_mask.all():
            return np.flatnonzero(~test_mask), np.flatnonzero(test_mask)
    raise GenerationError("holdout left no training points")


def latin_hypercube(n: int, D: int, rng: np.random.Generator) -> np.ndarray:
    """One point per bin ``[k/n, (k+1)/n)`` in every coordinate, columns independently permuted."""
    if n < 1 or D < 1:
        raise ValueError("need n >= 1 and D >= 1")
    u = rng.random((n, D))
    bins = np.column_stack([rng.permutation(n) for _ in range(D)])
    return (bins + u) / n


def evaluation_points(f: MeanFunction, n0: int, rng: np.random.Generator) -> np.ndarray:
    """Equally spaced bin midpoints for 1-D means, a Latin hypercube otherwise."""
    if f.dim == 1:
        return ((np.arange(n0) + 0.5) / n0)[:, None]
    return latin_hypercube(n0, f.dim, rng)


# ---------------------------------------------------------------------------
# metrics


def mise(predictor: Callable[[np.ndarray], np.ndarray], f: MeanFunction, eval_points) -> float:
    """Mean squared difference between ``f`` and ``predictor`` over ``eval_points``."""
    pts = np.asarray(eval_points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] == 0:
        raise ValueError("eval_points is empty")
    diff = f(pts) - np.asarray(predictor(pts), dtype=float)
    return float(np.mean(diff * diff))


def relative_mse(y_hat, y_test) -> float:
    """Holdout squared error relative to the holdout sum of squares about its mean."""
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    y_test = np.asarray(y_test, dtype=float).ravel()
    if y_hat.size != y_test.size or y_test.size == 0:
        raise ValueError("need equal, nonzero lengths")
    denom = float(np.sum((y_test - y_test.mean()) ** 2))
    if denom == 0:
        raise ValueError("relative MSE undefined for constant y_test")
    return float(np.sum((y_test - y_hat) ** 2)) / denom


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ResultRecord:
    mean_kind: str
    sigma2: float
    phi: float
    tau2_frac: float
    n: int
    replicate: int
    method: str
    mise: float
    relative_mse: float
    runtime_ms: float
    seed: int
    error: str = ""


def _replicate_seeds(seed: int, rep: int) -> tuple[np.random.Generator, np.random.Generator, int]:
    data_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, rep, 0)))
    split_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, rep, 1)))
    forest_seed = int(np.random.SeedSequence(seed, spawn_key=(1, rep, 2)).generate_state(1, np.uint64)[0])
    return data_rng, split_rng, forest_seed


def _eval_set(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    return evaluation_points(cfg.mean, cfg.eval_points, rng)


def _run_replicate(cfg: ExperimentConfig, rep: int, eval_pts: np.ndarray | None = None) -> list[ResultRecord]:
    if eval_pts is None:
        eval_pts = _eval_set(cfg)
    data_rng, split_rng, fseed = _replicate_seeds(cfg.seed, rep)
    params = replace(cfg.forest, seed=fseed)
    f = cfg.mean

    def rec(method, m=math.nan, rel=math.nan, ms=math.nan, err=""):
        return ResultRecord(cfg.mean_kind, cfg.sigma2, cfg.phi, cfg.tau2_frac, cfg.n, rep, method, m, rel, ms, fseed, err)

    try:
        data = gen_dataset(cfg, data_rng)
        if cfg.holdout == "boxes":
            tr, te = spatial_holdout(data, split_rng)
        else:
            tr, te = np.arange(data.n), np.empty(0, dtype=np.intp)
        train, test = data.subset(tr), data.subset(te)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error row
        logger.warning("replicate %d: data generation failed: %s", rep, exc)
        return [rec(m, err=f"{type(exc).__name__}: {exc}") for m in cfg.methods]

    def rel_or_nan(pred_fn):
        if test.n == 0:
            return math.nan
        return relative_mse(pred_fn(), test.y)

    out: dict[str, ResultRecord] = {}
    rf = None
    rf_ms = 0.0
    rk_report = None
    needs_rf = {"RF", "RF-RK", "RF-GLS"} & set(cfg.methods)
    if needs_rf:
        t0 = time.perf_counter()
        try:
            rf = fit_forest(train, None, params)
        except Exception as exc:  # noqa: BLE001
            for m in needs_rf:
                out[m] = rec(m, err=f"{type(exc).__name__}: {exc}")
        rf_ms = 1000 * (time.perf_counter() - t0)
    for method in cfg.methods:
        if method in out:
            continue
        t0 = time.perf_counter()
        try:
            if method == "RF":
                m = mise(rf.predict, f, eval_pts)
                rel = rel_or_nan(lambda: rf.predict(test.X))
                extra = rf_ms
            elif method == "RF-RK":
                resid = train.y - rf.predict(train.X)
                if rk_report is None:
                    rk_report = estimate_params(resid, train.locations)
                ctx = build_kriging_context(train.locations, rk_report.spec_hat, resid)
                m = mise(rf.predict, f, eval_pts)
                rel = rel_or_nan(lambda: rf.predict(test.X) + kriging_correction(ctx, test.locations))
                extra = rf_ms
            else:
                oracle = cfg.true_spec if method == "RF-GLS-oracle" else None
                res = fit_pipeline(train, params, oracle_spec=oracle, stage1_forest=rf,
                                   n_neighbors=cfg.n_neighbors, stage2_report=None if oracle else rk_report)
                if oracle is None and rk_report is None:
                    rk_report = res.report
                m = mise(res.forest.predict, f, eval_pts)
                rel = rel_or_nan(
                    lambda: res.forest.predict(test.X) + kriging_correction(res.context, test.locations)
                )
                extra = rf_ms if rf is not None else 0.0
            ms = 1000 * (time.perf_counter() - t0) + extra
            out[method] = rec(method, m, rel, ms)
        except Exception as exc:  # noqa: BLE001
            logger.warning("replicate %d, %s failed: %s", rep, method, exc)
            out[method] = rec(method, err=f"{type(exc).__name__}: {exc}")
    return [out[m] for m in cfg.methods]


def _run_replicate_star(args):
    return _run_replicate(*args)


def run_experiment(cfg: ExperimentConfig, n_workers: int = 1) -> list[ResultRecord]:
    """One record per (replicate, method), ordered by replicate then method.

    Every replicate draws from streams keyed by ``(cfg.seed, replicate)``,
    so the output does not depend on ``n_workers``.  Failures become rows
    with a nonempty ``error`` field.
    """
    if cfg.replicates == 0:
        return []
    eval_pts = _eval_set(cfg)
    jobs = [(cfg, r, eval_pts) for r in range(cfg.replicates)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            chunks = list(pool.map(_run_replicate_star, jobs))
    else:
        chunks = [_run_replicate(*j) for j in jobs]
    return [r for chunk in chunks for r in chunk]


# ---------------------------------------------------------------------------
# single-split CART versus DART on the step function


@dataclass
class Figure2Result:
    """Per-replicate root splits plus criterion curves interpolated on ``grid``.

    ``rows`` columns: replicate, cart_cutoff, dart_cutoff, cart_left,
    cart_right, dart_left, dart_right.  DART curves are divided by ``alpha``.
    """

    rows: np.ndarray
    grid: np.ndarray
    cart_curves: np.ndarray
    dart_curves: np.ndarray
    alpha: float

    COLUMNS = ("replicate", "cart_cutoff", "dart_cutoff", "cart_left", "cart_right", "dart_left", "dart_right")


def figure2_experiment(replicates: int = 100, seed: int = 0, n: int = 200, sigma2: float = 1.0,
                       phi: float | None = None, grid_size: int = 99) -> Figure2Result:
    """Root split of a two-leaf tree under OLS (CART) and exact-GP GLS (DART) loss.

    Errors are an exponential GP on the lattice ``1/n, 2/n, ..., 1``; the
    single covariate is iid uniform.  The working precision for DART is the
    exact one: on an ordered 1-D lattice the one-neighbor NNGP factor of an
    exponential covariance is exact.
    """
    if phi is None:
        phi = phi_for_range(0.5)
    spec = CovarianceSpec(kind="exponential", sigma2=sigma2, phi=phi)
    loc = (np.arange(1, n + 1) / n)[:, None]
    factor = nngp_factor(loc, spec, 1)
    alpha = factor.alpha
    ones = np.ones(n)
    op_dart = resampled_precision(factor, ones)
    op_cart = resampled_precision(identity_factor(n), ones)
    step = MeanFunction("step")
    grid = (np.arange(grid_size) + 1) / (grid_size + 1)
    rows = np.empty((replicates, 7))
    cart_curves = np.empty((replicates, grid_size))
    dart_curves = np.empty((replicates, grid_size))
    root = Membership(np.zeros(n, dtype=np.intp), 1)
    for r in range(replicates):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        X = rng.random((n, 1))
        y = step(X) + sample_gp(loc, spec, rng)
        data = SpatialDataset(y, X, loc)
        row = [r]
        fits = []
        for op, curves, scale in ((op_cart, cart_curves, 1.0), (op_dart, dart_curves, alpha)):
            tree = grow_tree(data, op, 2, 1, 1, np.random.default_rng(0))
            (_, _, c), = tree.splits()
            fits.append((c, tree.value[tree.left[0]], tree.value[tree.right[0]]))
            cuts, vals = split_profile(root, 0, 0, op, data)
            curves[r] = np.interp(grid, cuts, vals / scale)
        row += [fits[0][0], fits[1][0], fits[0][1], fits[0][2], fits[1][1], fits[1][2]]
        rows[r] = row
    return Figure2Result(rows, grid, cart_curves, dart_curves, alpha)

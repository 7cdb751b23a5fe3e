"""Covariance models, dense covariance matrices and precision-matrix checks.

The Matérn family is parametrized as

    C(d) = sigma2 * 2**(1 - nu) * (sqrt(2) * phi * d)**nu * K_nu(sqrt(2) * phi * d) / Gamma(nu)

so the exponential kernel (nu = 1/2) reads ``sigma2 * exp(-sqrt(2) * phi * d)``.
Note the fixed ``sqrt(2)`` inside the argument; other packages often scale
by ``sqrt(2 * nu)`` instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, sparse, special

__all__ = [
    "CovarianceSpec",
    "DenseCov",
    "DominanceReport",
    "ParameterError",
    "matern_cov",
    "build_cov_matrix",
    "pairwise_distances",
    "ar_autocovariance",
    "ar_cholesky_factor",
    "check_diag_dominance",
]

#: distances below this are treated as exactly zero
ZERO_DISTANCE = 1e-12
#: argument at which general-order Bessel evaluation switches to the
#: large-argument expansion
BESSEL_SWITCH = 30.0

KINDS = ("exponential", "matern", "ar")


class ParameterError(ValueError):
    """Invalid covariance-model parameters."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Parametrized covariance model.

    ``kind`` is one of ``"exponential"``, ``"matern"`` or ``"ar"``.  GP kinds
    use ``sigma2``, ``phi``, ``nu`` (Matérn only) and the nugget ``tau2``;
    the AR kind uses ``ar_coeffs`` (a_1..a_q) and ``innovation_var``.
    """

    kind: str = "exponential"
    sigma2: float = 1.0
    phi: float = 1.0
    nu: float = 0.5
    tau2: float = 0.0
    ar_coeffs: tuple[float, ...] = ()
    innovation_var: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown covariance kind {self.kind!r}")
        object.__setattr__(self, "ar_coeffs", tuple(float(a) for a in self.ar_coeffs))
        vals = (self.sigma2, self.phi, self.nu, self.tau2, self.innovation_var)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError("covariance parameters must be finite")
        if self.sigma2 < 0 or self.tau2 < 0:
            raise ParameterError("sigma2 and tau2 must be nonnegative")
        if self.kind in ("exponential", "matern"):
            if self.phi <= 0:
                raise ParameterError("phi must be positive")
            if self.kind == "exponential":
                object.__setattr__(self, "nu", 0.5)
            elif self.nu <= 0:
                raise ParameterError("nu must be positive")
        else:
            if not self.ar_coeffs:
                raise ParameterError("AR model needs at least one coefficient")
            if self.innovation_var <= 0:
                raise ParameterError("innovation_var must be positive")
            if not ar_is_stable(self.ar_coeffs):
                raise ParameterError(f"AR coefficients {self.ar_coeffs} are not stable")

    @property
    def q(self) -> int:
        return len(self.ar_coeffs)

    @property
    def marginal_var(self) -> float:
        if self.kind == "ar":
            return float(ar_autocovariance(self.ar_coeffs, 0)[0] * self.innovation_var)
        return self.sigma2 + self.tau2

    def replace(self, **changes) -> "CovarianceSpec":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class DenseCov:
    """Symmetric covariance matrix with a singularity flag."""

    entries: np.ndarray
    singular_warning: bool = False

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class DominanceReport:
    passes_weak: bool
    passes_strong: bool
    xi: float
    min_diag: float = field(default=float("nan"))
    max_offdiag_sum: float = field(default=float("nan"))


def ar_is_stable(coeffs: Sequence[float]) -> bool:
    """All roots of ``1 - a_1 z - ... - a_q z^q`` lie outside the unit circle."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size == 0 or not np.any(coeffs):
        return True
    # np.roots wants highest degree first
    poly = np.concatenate([-coeffs[::-1], [1.0]])
    poly = np.trim_zeros(poly, "f")
    roots = np.roots(poly)
    return bool(np.all(np.abs(roots) > 1.0 + 1e-12))


def _bessel_k_half_integer(nu: float, x: np.ndarray) -> np.ndarray:
    """exp(x) * K_nu(x) for nu = n + 1/2, by the terminating series."""
    order = int(round(abs(nu) - 0.5))
    total = np.zeros_like(x)
    for k in range(order + 1):
        c = math.factorial(order + k) / (math.factorial(k) * math.factorial(order - k))
        total += c / (2.0 * x) ** k
    return np.sqrt(np.pi / (2.0 * x)) * total


def _bessel_k_scaled(nu: float, x: np.ndarray) -> np.ndarray:
    """exp(x) * K_nu(x) for x > 0."""
    if abs(2.0 * nu - round(2.0 * nu)) < 1e-12 and int(round(2.0 * nu)) % 2 == 1:
        return _bessel_k_half_integer(nu, x)
    out = np.empty_like(x)
    small = x < BESSEL_SWITCH
    out[small] = special.kve(nu, x[small])
    xl = x[~small]
    if xl.size:
        # Hankel expansion, accurate to double precision for x >= 30 and moderate nu
        mu = 4.0 * nu * nu
        term = np.ones_like(xl)
        total = np.ones_like(xl)
        prev = np.full_like(xl, np.inf)
        for k in range(1, 30):
            term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * xl)
            # asymptotic series: stop before the terms start to grow
            grow = np.abs(term) > prev
            term = np.where(grow, 0.0, term)
            total += term
            prev = np.where(grow, 0.0, np.abs(term))
            if np.all(np.abs(term) < 1e-17 * np.abs(total)):
                break
        out[~small] = np.sqrt(np.pi / (2.0 * xl)) * total
    return out


def matern_cov(d, spec: CovarianceSpec):
    """GP part of the Matérn/exponential covariance at distance(s) ``d``.

    Scalar input gives a float, array input an array of the same shape.
    The nugget is not included.
    """
    if spec.kind not in ("matern", "exponential"):
        raise ParameterError("matern_cov needs a matern or exponential spec")
    if spec.nu <= 0:
        raise ParameterError("nu must be positive")
    scalar = np.ndim(d) == 0
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and nonnegative")
    flat = d.ravel()
    out = np.full(flat.shape, float(spec.sigma2))
    pos = flat >= ZERO_DISTANCE
    if np.any(pos):
        x = math.sqrt(2.0) * spec.phi * flat[pos]
        if spec.kind == "exponential" or spec.nu == 0.5:
            out[pos] = spec.sigma2 * np.exp(-x)
        else:
            nu = spec.nu
            logc = (1.0 - nu) * math.log(2.0) - math.lgamma(nu)
            with np.errstate(over="ignore", invalid="ignore"):
                val = np.exp(logc + nu * np.log(x) - x) * _bessel_k_scaled(nu, x)
            out[pos] = spec.sigma2 * np.nan_to_num(val, nan=0.0, posinf=0.0)
    out = out.reshape(d.shape)
    return float(out) if scalar else out


def _as_points(locations) -> np.ndarray:
    pts = np.asarray(locations, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError("locations must be a sequence of points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("locations must be finite")
    return pts


def pairwise_distances(a, b=None) -> np.ndarray:
    a = _as_points(a)
    b = a if b is None else _as_points(b)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_cov_matrix(locations, spec: CovarianceSpec) -> DenseCov:
    """Dense ``C + tau2 * I`` over ``locations`` (1-D or 2-D points)."""
    if spec.kind not in ("matern", "exponential"):
        raise ParameterError("build_cov_matrix needs a matern or exponential spec")
    pts = _as_points(locations)
    if pts.shape[1] not in (1, 2):
        raise ValueError("locations must be 1- or 2-dimensional")
    dist = pairwise_distances(pts)
    cov = matern_cov(dist, spec)
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += spec.tau2
    singular = False
    if spec.tau2 == 0 and len(pts) > 1:
        off = dist.copy()
        np.fill_diagonal(off, np.inf)
        singular = bool(np.any(off < ZERO_DISTANCE))
    return DenseCov(cov, singular)


def ar_autocovariance(coeffs: Sequence[float], max_lag: int) -> np.ndarray:
    """Autocovariances gamma(0..max_lag) of a stationary AR(q) with unit innovations.

    Solves the Yule-Walker equations for gamma(0..q), then extends by the
    AR recursion.
    """
    a = np.asarray(coeffs, dtype=float)
    q = a.size
    # unknowns gamma(0..q); equation k: gamma(k) - sum_j a_j gamma(|k-j|) = [k == 0]
    A = np.eye(q + 1)
    for k in range(q + 1):
        for j in range(1, q + 1):
            A[k, abs(k - j)] -= a[j - 1]
    rhs = np.zeros(q + 1)
    rhs[0] = 1.0
    gamma = np.linalg.solve(A, rhs)
    out = np.empty(max(max_lag, q) + 1)
    out[: q + 1] = gamma
    for k in range(q + 1, out.size):
        out[k] = sum(a[j - 1] * out[k - j] for j in range(1, q + 1))
    return out[: max_lag + 1]


def ar_cholesky_factor(n: int, spec: CovarianceSpec):
    """Banded factor ``B`` with ``B.T @ B`` equal to the AR(q) precision matrix.

    Rows ``q+1..n`` carry ``(-a_q, ..., -a_1, 1) / sigma_eta``; the leading
    ``q x q`` block is the lower-triangular ``L`` with ``L.T @ L = M^{-1}``
    for ``M`` the stationary covariance of the first ``q`` values.
    """
    from .cholfactor import PrecisionFactor

    if spec.kind != "ar":
        raise ParameterError("ar_cholesky_factor needs an ar spec")
    q = spec.q
    if n <= q:
        raise ValueError(f"need n > q (got n={n}, q={q})")
    a = np.asarray(spec.ar_coeffs)
    gamma = ar_autocovariance(a, q)
    M = linalg.toeplitz(gamma[:q]) if q > 0 else np.zeros((0, 0))
    # L = R^{-1} with R the lower Cholesky factor of M, so that L M L^T = I
    R = linalg.cholesky(M, lower=True)
    L = linalg.solve_triangular(R, np.eye(q), lower=True)
    scale = 1.0 / math.sqrt(spec.innovation_var)

    rows, cols, vals = [], [], []
    for i in range(q):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
            vals.append(L[i, j])
    rho = np.concatenate([-a[::-1], [1.0]])
    for i in range(q, n):
        rows.extend([i] * (q + 1))
        cols.extend(range(i - q, i + 1))
        vals.extend(rho)
    B = sparse.csr_matrix((np.asarray(vals) * scale, (rows, cols)), shape=(n, n))
    B.sort_indices()
    return PrecisionFactor(B, q=q)


def check_diag_dominance(Q, mode: str = "weak") -> DominanceReport:
    """Diagonal-dominance checks on a precision matrix or a factor's ``B.T @ B``.

    Weak: ``Q_ii - sum_{j != i} |Q_ij| > 0`` for all ``i`` (margin ``xi``).
    Strong: ``min_i Q_ii > sqrt(2) * max_i sum_{j != i} |Q_ij|``.
    Both flags are always reported; ``mode`` only selects which one the
    caller cares about and is validated.
    """
    from .cholfactor import PrecisionFactor

    if mode not in ("weak", "strong"):
        raise ValueError("mode must be 'weak' or 'strong'")
    if isinstance(Q, PrecisionFactor):
        Q = Q.precision()
    if sparse.issparse(Q):
        Q = sparse.csr_matrix(Q)
        diag = Q.diagonal()
        offsum = np.asarray(abs(Q).sum(axis=1)).ravel() - np.abs(diag)
    else:
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError("Q must be square")
        diag = np.diag(Q).copy()
        offsum = np.abs(Q).sum(axis=1) - np.abs(diag)
    margin = diag - offsum
    xi = float(margin.min())
    min_diag = float(diag.min())
    max_off = float(offsum.max())
    weak = bool(xi > 0)
    strong = bool(min_diag > math.sqrt(2.0) * max_off) and weak
    return DominanceReport(weak, strong, xi, min_diag, max_off)

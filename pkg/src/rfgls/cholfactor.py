"""Sparse lower-triangular working-precision factors and resampled operators.

A :class:`PrecisionFactor` holds ``B = Sigma^{-1/2}``, stored row-sparse as a
CSR matrix, with ``B.T @ B = Sigma^{-1}``.  Row ``i`` has nonzeros only at
its conditioning set ``N(i)`` and at ``i`` itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, sparse

from .covmodel import CovarianceSpec, ParameterError, _as_points, matern_cov

__all__ = [
    "PrecisionFactor",
    "PrecisionOperator",
    "identity_factor",
    "dense_factor",
    "order_locations",
    "nearest_earlier_neighbors",
    "nngp_factor",
    "apply_factor",
    "resampled_precision",
    "quad_form",
    "write_factor",
    "read_factor",
]

JITTER = 1e-10
DENSE_LIMIT = 500


@dataclass(frozen=True, eq=False)
class PrecisionFactor:
    """Row-sparse lower-triangular ``Sigma^{-1/2}``.

    ``q`` is the largest conditioning-set size, ``jittered`` flags rows whose
    conditioning covariance needed a diagonal jitter.
    """

    matrix: sparse.csr_matrix
    q: int = 0
    jittered: bool = False

    def __post_init__(self):
        B = sparse.csr_matrix(self.matrix, dtype=float)
        B.sum_duplicates()
        B.sort_indices()
        object.__setattr__(self, "matrix", B)
        n, m = B.shape
        if n != m:
            raise ValueError("factor must be square")
        if n and sparse.triu(B, k=1).nnz:
            raise ValueError("factor must be lower triangular")
        diag = B.diagonal()
        if np.any(diag <= 0):
            raise ValueError("factor diagonal must be strictly positive")
        width = int(np.diff(B.indptr).max()) - 1 if n else 0
        object.__setattr__(self, "q", max(self.q, width))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        B = self.matrix
        return B.indices[B.indptr[i] : B.indptr[i + 1]]

    def coefficients(self, i: int) -> np.ndarray:
        B = self.matrix
        return B.data[B.indptr[i] : B.indptr[i + 1]]

    @cached_property
    def alpha(self) -> float:
        """Squared norm of the stationary coefficient row (the last row)."""
        if self.n == 0:
            return float("nan")
        c = self.coefficients(self.n - 1)
        return float(np.dot(c, c))

    def precision(self) -> sparse.csr_matrix:
        B = self.matrix
        return sparse.csr_matrix(B.T @ B)

    def toarray(self) -> np.ndarray:
        if self.n > DENSE_LIMIT:
            raise ValueError(f"refusing to densify a factor with n={self.n} > {DENSE_LIMIT}")
        return self.matrix.toarray()

    def is_stationary(self, rtol: float = 1e-10) -> bool:
        """True if rows ``q+1..n`` share one banded coefficient pattern."""
        q = self.q
        if self.n <= q + 1:
            return True
        ref = self.coefficients(self.n - 1)
        for i in range(q, self.n):
            idx = self.neighbors(i)
            if idx.size != q + 1 or not np.array_equal(idx, np.arange(i - q, i + 1)):
                return False
            if not np.allclose(self.coefficients(i), ref, rtol=rtol, atol=0.0):
                return False
        return True


def identity_factor(n: int) -> PrecisionFactor:
    return PrecisionFactor(sparse.identity(n, format="csr"), q=0)


def dense_factor(cov: np.ndarray) -> PrecisionFactor:
    """Exact factor of a dense covariance: ``B = R^{-1}`` for ``cov = R R^T``."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    R = linalg.cholesky(cov, lower=True)
    B = linalg.solve_triangular(R, np.eye(n), lower=True)
    return PrecisionFactor(sparse.csr_matrix(np.tril(B)), q=n - 1)


def order_locations(locations) -> np.ndarray:
    """Ordering used to build NNGP factors (0-based permutation).

    1-D points sort ascending; 2-D points sort by coordinate sum with the
    first coordinate breaking ties (then the original index).
    """
    pts = _as_points(locations)
    idx = np.arange(len(pts))
    if pts.shape[1] == 1:
        return np.lexsort((idx, pts[:, 0]))
    return np.lexsort((idx, pts[:, 0], pts.sum(axis=1)))


def nearest_earlier_neighbors(locations, q: int) -> list[np.ndarray]:
    """For each ``i``, the ``min(q, i)`` nearest points among ``0..i-1``.

    Exact Euclidean distance; equal distances resolve to the lower index.
    Each returned set is sorted ascending.
    """
    pts = _as_points(locations)
    out = [np.empty(0, dtype=np.intp)]
    for i in range(1, len(pts)):
        diff = pts[:i] - pts[i]
        dist = np.einsum("ij,ij->i", diff, diff)
        k = min(q, i)
        if k < i:
            kth = np.partition(dist, k - 1)[k - 1]
            cand = np.flatnonzero(dist <= kth)
            order = np.lexsort((cand, dist[cand]))[:k]
            nb = cand[order]
        else:
            nb = np.arange(i)
        out.append(np.sort(nb))
    return out


def nngp_factor(locations, spec: CovarianceSpec, q: int) -> PrecisionFactor:
    """NNGP factor over already-ordered ``locations``.

    Row ``i`` is ``(-c^T C^{-1}, 1) / sqrt(v)`` on ``(N_q(i), i)`` with
    ``C`` the (nugget-inclusive) covariance of the neighbors, ``c`` their
    covariance with ``i`` and ``v`` the conditional variance.
    """
    if spec.kind not in ("matern", "exponential"):
        raise ParameterError("nngp_factor needs a matern or exponential spec")
    pts = _as_points(locations)
    n = len(pts)
    if not 1 <= q < max(n, 2):
        raise ValueError(f"need 1 <= q < n (got q={q}, n={n})")
    marg = spec.sigma2 + spec.tau2
    if marg <= 0:
        raise ParameterError("marginal variance must be positive")
    neighbors = nearest_earlier_neighbors(pts, q)
    rows, cols, vals = [0], [0], [1.0 / math.sqrt(marg)]
    jittered = False
    for i in range(1, n):
        nb = neighbors[i]
        sub = pts[nb]
        diff = sub[:, None, :] - sub[None, :, :]
        C = matern_cov(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)), spec)
        C[np.diag_indices_from(C)] += spec.tau2
        c = matern_cov(np.sqrt(((sub - pts[i]) ** 2).sum(axis=1)), spec)
        try:
            cf = linalg.cho_factor(C, lower=True, check_finite=False)
            w = linalg.cho_solve(cf, c, check_finite=False)
            v = marg - np.dot(c, w)
            if not v > JITTER * marg:
                raise linalg.LinAlgError("conditional variance not positive")
        except linalg.LinAlgError:
            jittered = True
            C[np.diag_indices_from(C)] += JITTER * marg
            w = linalg.solve(C, c, assume_a="sym")
            v = max(marg - np.dot(c, w), JITTER * marg)
        s = 1.0 / math.sqrt(v)
        rows.extend([i] * (nb.size + 1))
        cols.extend(nb.tolist())
        cols.append(i)
        vals.extend((-w * s).tolist())
        vals.append(s)
    B = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return PrecisionFactor(B, q=q, jittered=jittered)


def apply_factor(factor: PrecisionFactor, v) -> np.ndarray:
    """``Sigma^{-1/2} v`` by a row-sparse product."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != factor.n:
        raise ValueError(f"length mismatch: factor has n={factor.n}, vector has {v.shape[0]}")
    return factor.matrix @ v


@dataclass(frozen=True, eq=False)
class PrecisionOperator:
    """``Q_t = B^T diag(weights) B`` for per-observation resample counts."""

    factor: PrecisionFactor
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.factor.n,):
            raise ValueError("weights must have one entry per observation")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.factor.n

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        B = self.factor.matrix
        Q = sparse.csr_matrix(B.T @ (B.multiply(self.weights[:, None])))
        Q.sort_indices()
        return Q

    def dot(self, v: np.ndarray) -> np.ndarray:
        """``Q_t v``; ``v`` may be a vector or an ``n x k`` array."""
        B = self.factor.matrix
        Bv = B @ v
        w = self.weights if Bv.ndim == 1 else self.weights[:, None]
        return B.T @ (w * Bv)


def resampled_precision(factor: PrecisionFactor, counts) -> PrecisionOperator:
    return PrecisionOperator(factor, np.asarray(counts, dtype=float))


def quad_form(op: PrecisionOperator, a, b) -> float:
    """``a^T Q_t b`` as ``sum_i w_i (Ba)_i (Bb)_i``; exactly symmetric in ``a, b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (op.n,) or b.shape != (op.n,):
        raise ValueError("vector lengths must match the operator size")
    Ba = op.factor.matrix @ a
    Bb = op.factor.matrix @ b
    return float(np.sum(op.weights * (Ba * Bb)))


def write_factor(factor: PrecisionFactor, path) -> None:
    """Plain-text rows ``i: j1 c1 j2 c2 ...`` (1-based indices, 17 digits)."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in format_factor(factor):
            fh.write(line + "\n")


def format_factor(factor: PrecisionFactor) -> list[str]:
    lines = []
    for i in range(factor.n):
        parts = [f"{i + 1}:"]
        for j, c in zip(factor.neighbors(i), factor.coefficients(i)):
            parts.append(f"{j + 1} {c:.17g}")
        lines.append(" ".join(parts))
    return lines


def parse_factor(lines) -> PrecisionFactor:
    rows, cols, vals = [], [], []
    n = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        head, _, rest = line.partition(":")
        try:
            i = int(head) - 1
            tok = rest.split()
            if len(tok) % 2:
                raise ValueError
            for j, c in zip(tok[::2], tok[1::2]):
                rows.append(i)
                cols.append(int(j) - 1)
                vals.append(float(c))
        except ValueError:
            raise ValueError(f"malformed factor row at line {lineno}: {line!r}") from None
        n = max(n, i + 1)
    B = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return PrecisionFactor(B)


def read_factor(path) -> PrecisionFactor:
    with open(path, encoding="utf-8") as fh:
        return parse_factor(fh)

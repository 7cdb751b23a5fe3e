"""GLS-style regression trees: DART node splitting and GLS leaf representatives.

Split search works against the partition of the previous tree level.  For a
level with membership ``Z0`` and Gram ``G0 = Z0^T Q Z0``, splitting node ``P``
into ``L`` and ``R`` spans the same column space as adding the single column
``1_L`` to ``Z0``.  The DART criterion is therefore a rank-one gain

    n * v(d, c) = (r0^T Q 1_L)^2 / (1_L^T Q 1_L - h^T G0^{-1} h),   h = Z0^T Q 1_L,

with ``r0`` the residual of the parent-level GLS fit.  Numerator, ``h`` and
``1_L^T Q 1_L`` are all prefix sums over the node's members taken in feature
order, so every cutoff of a feature is evaluated in one sweep.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, sparse

from .cholfactor import PrecisionOperator, quad_form
from .data import SpatialDataset, fmt

__all__ = [
    "Membership",
    "SplitCandidate",
    "Split",
    "TreeModel",
    "DegeneratePartitionError",
    "RidgeWarning",
    "gls_solve",
    "dart_criterion",
    "split_profile",
    "best_split",
    "grow_tree",
    "predict_tree",
    "format_tree",
    "parse_tree",
]

RIDGE = 1e-8
# candidate whose new column is (numerically) inside the parent span
DEGENERATE_RTOL = 1e-10
# criterion values this close (relative) count as tied; ties then go to the
# lowest feature and the lowest cutoff instead of to rounding noise
TIE_RTOL = 1e-10


class DegeneratePartitionError(RuntimeError):
    """Gram matrix of a partition is singular even after the ridge."""


class RidgeWarning(RuntimeWarning):
    """A ridge was added to a singular Gram matrix."""


@dataclass(frozen=True, eq=False)
class Membership:
    """Assignment of each observation to one of ``leaf_count`` leaves (0-based)."""

    leaf_of: np.ndarray
    leaf_count: int

    def __post_init__(self):
        leaf_of = np.asarray(self.leaf_of, dtype=np.intp)
        if leaf_of.ndim != 1:
            raise ValueError("leaf_of must be one-dimensional")
        if leaf_of.size and (leaf_of.min() < 0 or leaf_of.max() >= self.leaf_count):
            raise ValueError("leaf ids out of range")
        object.__setattr__(self, "leaf_of", leaf_of)

    @classmethod
    def from_groups(cls, groups: Sequence[Iterable[int]], n: int | None = None) -> "Membership":
        groups = [np.asarray(list(g) if not isinstance(g, np.ndarray) else g, dtype=np.intp) for g in groups]
        n = sum(len(g) for g in groups) if n is None else n
        leaf_of = np.full(n, -1, dtype=np.intp)
        for k, g in enumerate(groups):
            leaf_of[g] = k
        if np.any(leaf_of < 0):
            raise ValueError("groups do not cover every observation")
        return cls(leaf_of, len(groups))

    @property
    def n(self) -> int:
        return self.leaf_of.size

    @property
    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.leaf_of, kind="stable")
        bounds = np.searchsorted(self.leaf_of[order], np.arange(self.leaf_count + 1))
        return [order[bounds[k] : bounds[k + 1]] for k in range(self.leaf_count)]

    def indicator(self) -> sparse.csr_matrix:
        n = self.n
        return sparse.csr_matrix((np.ones(n), (np.arange(n), self.leaf_of)), shape=(n, self.leaf_count))


@dataclass(frozen=True)
class SplitCandidate:
    d: int
    c: float


@dataclass(frozen=True)
class Split:
    d: int
    c: float
    value: float


# ---------------------------------------------------------------------------
# GLS pieces


def _solve_gram(G: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        cf = linalg.cho_factor(G, lower=True, check_finite=False)
        return linalg.cho_solve(cf, b, check_finite=False), False
    except linalg.LinAlgError:
        pass
    K = G.shape[0]
    tr = float(np.trace(G))
    if not tr > 0:
        raise DegeneratePartitionError("Gram matrix is zero")
    Gr = G + RIDGE * tr / K * np.eye(K)
    try:
        cf = linalg.cho_factor(Gr, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise DegeneratePartitionError("Gram matrix is singular after ridge") from None
    return linalg.cho_solve(cf, b, check_finite=False), True


class _QStructure:
    """COO view of ``Q_t`` reused across the levels of one tree."""

    def __init__(self, op: PrecisionOperator, require_inbag: bool = True):
        Q = op.matrix
        self.Q = Q
        self.n = Q.shape[0]
        self.rows = np.repeat(np.arange(self.n), np.diff(Q.indptr))
        self.cols = Q.indices
        self.vals = Q.data
        self.diagonal_only = bool(np.all(self.rows == self.cols))
        self.diag = Q.diagonal()
        # with require_inbag off every row counts as in-bag
        self.inbag = (op.weights > 0 if require_inbag else np.ones(self.n, dtype=bool)).astype(np.intp)

    def times_indicator(self, leaf_of: np.ndarray, K: int) -> np.ndarray:
        """``Q @ Z`` as a dense ``n x K`` array."""
        flat = self.rows * K + leaf_of[self.cols]
        return np.bincount(flat, weights=self.vals, minlength=self.n * K).reshape(self.n, K)

    def submatrix(self, idx: np.ndarray):
        """Entries of ``Q[idx][:, idx]`` as local (row, col, value) triplets."""
        if self.diagonal_only:
            local = np.arange(idx.size)
            return local, local, self.diag[idx]
        sub = self.Q[idx][:, idx].tocoo()
        return sub.row, sub.col, sub.data


@dataclass
class _Level:
    leaf_of: np.ndarray
    H: np.ndarray  # Q Z0
    Ginv: np.ndarray
    g: np.ndarray  # Q r0
    beta: np.ndarray
    ridged: bool


def _level(qs: _QStructure, leaf_of: np.ndarray, K: int, y: np.ndarray) -> _Level:
    H = qs.times_indicator(leaf_of, K)
    flat = (leaf_of[:, None] * K + np.arange(K)).ravel()
    G = np.bincount(flat, weights=H.ravel(), minlength=K * K).reshape(K, K)
    G = 0.5 * (G + G.T)
    rhs = H.T @ y
    d = np.diag(G)
    if qs.diagonal_only and np.all(d > 0):
        beta = rhs / d
        r0 = y - beta[leaf_of]
        return _Level(leaf_of, H, np.diag(1.0 / d), qs.Q @ r0, beta, False)
    try:
        cf = linalg.cho_factor(G, lower=True, check_finite=False)
        beta = linalg.cho_solve(cf, rhs, check_finite=False)
        Ginv = linalg.cho_solve(cf, np.eye(K), check_finite=False)
        ridged = False
    except linalg.LinAlgError:
        beta, ridged = _solve_gram(G, rhs)
        Ginv = np.linalg.pinv(G)
    r0 = y - beta[leaf_of]
    g = qs.Q @ r0
    return _Level(leaf_of, H, Ginv, g, beta, ridged)


def _gls(qs: _QStructure, leaf_of: np.ndarray, K: int, y: np.ndarray) -> tuple[np.ndarray, bool]:
    H = qs.times_indicator(leaf_of, K)
    flat = (leaf_of[:, None] * K + np.arange(K)).ravel()
    G = np.bincount(flat, weights=H.ravel(), minlength=K * K).reshape(K, K)
    d = np.diag(G)
    if qs.diagonal_only and np.all(d > 0):
        return (H.T @ y) / d, False
    return _solve_gram(0.5 * (G + G.T), H.T @ y)


def gls_solve(membership: Membership, op: PrecisionOperator, y) -> np.ndarray:
    """Leaf representatives ``(Z^T Q_t Z)^{-1} Z^T Q_t y``.

    The Gram matrix is Cholesky-factorized; if that fails a ridge of
    ``1e-8 * trace / K`` is added and a :class:`RidgeWarning` is issued.
    """
    y = np.asarray(y, dtype=float)
    if membership.leaf_count < 1:
        raise ValueError("need at least one leaf")
    if y.shape != (op.n,) or membership.n != op.n:
        raise ValueError("size mismatch between membership, operator and y")
    beta, ridged = _gls(_QStructure(op), membership.leaf_of, membership.leaf_count, y)
    if ridged:
        warnings.warn("ridge added to singular Gram matrix", RidgeWarning, stacklevel=2)
    return beta


def dart_criterion(membership: Membership, node: int, cand: SplitCandidate, op: PrecisionOperator,
                   data: SpatialDataset) -> float | None:
    """DART criterion of splitting leaf ``node`` at ``cand``, computed from scratch.

    Both GLS problems (parent partition and the partition with ``node``
    replaced by its two children) are solved and the difference of their
    ``Q_t``-weighted residual sums of squares is returned, divided by ``n``.
    Returns ``None`` when one child would be empty.
    """
    y = data.y
    n = data.n
    members = np.flatnonzero(membership.leaf_of == node)
    goes_left = data.X[members, cand.d] < cand.c
    if goes_left.all() or not goes_left.any():
        return None
    K = membership.leaf_count
    child = membership.leaf_of.copy()
    child[members[~goes_left]] = K
    child_m = Membership(child, K + 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RidgeWarning)
        b0 = gls_solve(membership, op, y)
        b1 = gls_solve(child_m, op, y)
    r0 = y - b0[membership.leaf_of]
    r1 = y - b1[child_m.leaf_of]
    return (quad_form(op, r0, r0) - quad_form(op, r1, r1)) / n


# ---------------------------------------------------------------------------
# incremental sweep


@dataclass
class _SweepResult:
    cutoffs: np.ndarray
    values: np.ndarray  # -inf marks a rejected (degenerate) candidate
    k: np.ndarray  # left-child size at each cutoff
    perm: np.ndarray  # node members sorted by the feature


def _sweep(lev: _Level, X: np.ndarray, idx: np.ndarray, d: int, sub, inbag: np.ndarray) -> _SweepResult | None:
    xs_all = X[idx, d]
    order = np.argsort(xs_all, kind="stable")
    xs = xs_all[order]
    k = np.flatnonzero(xs[1:] > xs[:-1]) + 1
    if k.size == 0:
        return None
    perm = idx[order]
    m = idx.size
    rank = np.empty(m, dtype=np.intp)
    rank[order] = np.arange(m)
    r, c, v = sub
    bucket = np.maximum(rank[r], rank[c])
    S = np.cumsum(np.bincount(bucket, weights=v, minlength=m))[k - 1]
    A = np.cumsum(lev.g[perm])[k - 1]
    Hc = np.cumsum(lev.H[perm], axis=0)[k - 1]
    quad = np.einsum("ij,jk,ik->i", Hc, lev.Ginv, Hc)
    denom = S - quad
    ok = denom > DEGENERATE_RTOL * np.abs(S)
    # each child needs an observation with positive resample weight
    nb = np.cumsum(inbag[perm])
    ok &= (nb[k - 1] > 0) & (nb[k - 1] < nb[-1])
    n = lev.g.size
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(ok, A * A / np.where(ok, denom, 1.0) / n, -np.inf)
    cutoffs = 0.5 * (xs[k - 1] + xs[k])
    return _SweepResult(cutoffs, values, k, perm)


def _best_in_node(lev: _Level, qs: _QStructure, X: np.ndarray, idx: np.ndarray, features: Iterable[int]):
    sub = qs.submatrix(idx)
    best = None
    for d in sorted(int(f) for f in features):
        res = _sweep(lev, X, idx, d, sub, qs.inbag)
        if res is None:
            continue
        vmax = res.values.max()
        if not np.isfinite(vmax):
            continue
        j = int(np.flatnonzero(res.values >= vmax - TIE_RTOL * abs(vmax))[0])
        val = res.values[j]
        if best is None or val > best[2] + TIE_RTOL * abs(best[2]):
            best = (d, float(res.cutoffs[j]), float(val), int(res.k[j]), res.perm)
    return best


def split_profile(membership: Membership, node: int, d: int, op: PrecisionOperator,
                  data: SpatialDataset, require_inbag: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """All gap cutoffs of feature ``d`` in ``node`` and their DART values (sweep).

    Inadmissible cutoffs get ``-inf``.
    """
    qs = _QStructure(op, require_inbag)
    lev = _level(qs, membership.leaf_of, membership.leaf_count, data.y)
    idx = np.flatnonzero(membership.leaf_of == node)
    res = _sweep(lev, data.X, idx, d, qs.submatrix(idx), qs.inbag)
    if res is None:
        return np.empty(0), np.empty(0)
    return res.cutoffs, res.values


def best_split(membership: Membership, node: int, features: Iterable[int], op: PrecisionOperator,
               data: SpatialDataset) -> Split | None:
    """Maximizer of the DART criterion over all gap midpoints of ``features``.

    Ties (equal up to a relative ``1e-10``) go to the lowest feature index,
    then the lowest cutoff.  ``None``
    means the node has no admissible candidate.
    """
    qs = _QStructure(op)
    lev = _level(qs, membership.leaf_of, membership.leaf_count, data.y)
    idx = np.flatnonzero(membership.leaf_of == node)
    if idx.size < 2:
        return None
    best = _best_in_node(lev, qs, data.X, idx, features)
    if best is None:
        return None
    return Split(best[0], best[1], best[2])


# ---------------------------------------------------------------------------
# the tree


@dataclass(eq=False)
class TreeModel:
    """Binary tree in flat arrays; leaves have ``feature == -1``.

    Internal node ``i`` sends ``x`` to ``left[i]`` when ``x[feature[i]] < threshold[i]``
    and to ``right[i]`` otherwise.  ``value`` holds the GLS representative at
    leaves.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    criterion: np.ndarray = field(repr=False)
    n_members: np.ndarray = field(repr=False)
    t_n: int = 0
    t_c: int = 0
    m_try: int = 0
    ridged: bool = False

    @property
    def node_count(self) -> int:
        return self.feature.size

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    @property
    def leaf_count(self) -> int:
        return int(np.sum(self.feature < 0))

    def splits(self) -> list[tuple[int, int, float]]:
        """``(node, feature, cutoff)`` for every internal node in creation order."""
        return [(i, int(self.feature[i]), float(self.threshold[i])) for i in np.flatnonzero(self.feature >= 0)]

    def apply(self, X) -> np.ndarray:
        """Leaf node id reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = self.feature[node] >= 0
        while np.any(active):
            cur = node[active]
            f = self.feature[cur]
            go_left = X[np.flatnonzero(active), f] < self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def predict_tree(tree: TreeModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite vector")
    return float(tree.predict(x[None, :])[0])


def grow_tree(data: SpatialDataset, op: PrecisionOperator, t_n: int | None, t_c: int, m_try: int,
              rng: np.random.Generator, require_inbag: bool = True) -> TreeModel:
    """Grow one GLS-style tree level by level.

    Within a level every node is scored against the previous level's
    partition.  A node is split only if it has more than ``t_c`` members,
    the current leaf count is below ``t_n`` and some feature among its
    ``m_try`` random candidates has an admissible cutoff; a node with no
    admissible cutoff is final.  A cutoff is admissible when the two
    children are not collinear with the rest of the partition under ``Q_t``
    and (unless ``require_inbag`` is off) each holds at least one
    observation of positive weight.  Leaf representatives come from a single
    GLS solve on the terminal partition.
    """
    X, y = data.X, data.y
    n, D = X.shape
    if op.n != n:
        raise ValueError("operator size does not match the data")
    t_n = n if t_n is None else int(t_n)
    if t_n < 1 or t_c < 1 or not 1 <= m_try <= D:
        raise ValueError("need t_n >= 1, t_c >= 1 and 1 <= m_try <= D")
    qs = _QStructure(op, require_inbag)

    feature, threshold, left, right, crit, size = [-1], [np.nan], [-1], [-1], [np.nan], [n]
    partition: list[tuple[int, np.ndarray]] = [(0, np.arange(n))]
    final: set[int] = set()
    ridged = False

    def open_nodes():
        return any(idx.size > t_c and nid not in final for nid, idx in partition)

    while len(partition) < t_n and open_nodes():
        K = len(partition)
        leaf_of = np.empty(n, dtype=np.intp)
        for k, (_, idx) in enumerate(partition):
            leaf_of[idx] = k
        lev = _level(qs, leaf_of, K, y)
        ridged |= lev.ridged
        total = K
        nxt = []
        for nid, idx in partition:
            if idx.size <= t_c or total >= t_n or nid in final:
                nxt.append((nid, idx))
                continue
            feats = rng.choice(D, size=m_try, replace=False)
            best = _best_in_node(lev, qs, X, idx, feats)
            if best is None:
                final.add(nid)
                nxt.append((nid, idx))
                continue
            d, c, val, k, perm = best
            lid, rid = len(feature), len(feature) + 1
            feature[nid], threshold[nid], left[nid], right[nid], crit[nid] = d, c, lid, rid, val
            for part in (np.sort(perm[:k]), np.sort(perm[k:])):
                feature.append(-1)
                threshold.append(np.nan)
                left.append(-1)
                right.append(-1)
                crit.append(np.nan)
                size.append(part.size)
            nxt.append((lid, np.sort(perm[:k])))
            nxt.append((rid, np.sort(perm[k:])))
            total += 1
        if len(nxt) == len(partition):
            partition = nxt
            break
        partition = nxt

    leaf_of = np.empty(n, dtype=np.intp)
    for k, (_, idx) in enumerate(partition):
        leaf_of[idx] = k
    beta, r = _gls(qs, leaf_of, len(partition), y)
    ridged |= r
    value = np.full(len(feature), np.nan)
    for k, (nid, _) in enumerate(partition):
        value[nid] = beta[k]
    return TreeModel(
        feature=np.asarray(feature, dtype=np.intp),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.intp),
        right=np.asarray(right, dtype=np.intp),
        value=value,
        criterion=np.asarray(crit, dtype=float),
        n_members=np.asarray(size, dtype=np.intp),
        t_n=t_n,
        t_c=t_c,
        m_try=m_try,
        ridged=ridged,
    )


# ---------------------------------------------------------------------------
# text format (debugging aid, also used inside forest files)


def format_tree(tree: TreeModel) -> list[str]:
    lines = [f"tree nodes={tree.node_count} t_n={tree.t_n} t_c={tree.t_c} m_try={tree.m_try}"]
    for i in range(tree.node_count):
        if tree.feature[i] >= 0:
            lines.append(f"{i} split {tree.feature[i]} {fmt(tree.threshold[i])} {tree.left[i]} {tree.right[i]}")
        else:
            lines.append(f"{i} leaf {fmt(tree.value[i])}")
    return lines


def parse_tree(lines: Sequence[str]) -> TreeModel:
    head = lines[0].split()
    if not head or head[0] != "tree":
        raise ValueError(f"bad tree header {lines[0]!r}")
    meta = dict(tok.split("=", 1) for tok in head[1:])
    count = int(meta["nodes"])
    feature = np.full(count, -1, dtype=np.intp)
    threshold = np.full(count, np.nan)
    left = np.full(count, -1, dtype=np.intp)
    right = np.full(count, -1, dtype=np.intp)
    value = np.full(count, np.nan)
    for line in lines[1 : count + 1]:
        tok = line.split()
        i = int(tok[0])
        if tok[1] == "split":
            feature[i], threshold[i], left[i], right[i] = int(tok[2]), float(tok[3]), int(tok[4]), int(tok[5])
        elif tok[1] == "leaf":
            value[i] = float(tok[2])
        else:
            raise ValueError(f"bad tree line {line!r}")
    return TreeModel(feature, threshold, left, right, value, np.full(count, np.nan), np.zeros(count, dtype=np.intp),
                     int(meta["t_n"]), int(meta["t_c"]), int(meta["m_try"]))

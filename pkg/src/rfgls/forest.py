"""RF-GLS ensembles: contrast resampling and tree averaging."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cholfactor import PrecisionFactor, format_factor, identity_factor, parse_factor, resampled_precision
from .data import SpatialDataset
from .glstree import DegeneratePartitionError, TreeModel, format_tree, grow_tree, parse_tree

__all__ = [
    "ForestParams",
    "ForestModel",
    "tree_rng",
    "draw_resample_counts",
    "fit_forest",
    "predict_forest",
    "write_forest",
    "read_forest",
    "MAGIC",
]

logger = logging.getLogger(__name__)

MAGIC = "RFGLS-FOREST v1"
RESAMPLE_MODES = ("bootstrap", "none")


@dataclass(frozen=True)
class ForestParams:
    """``t_n=None`` means no leaf limit; ``m_try=None`` means ``max(1, D // 3)``.

    ``require_inbag`` forbids splits that leave a child without any
    observation of positive resample weight.
    """

    n_tree: int = 100
    t_n: int | None = None
    t_c: int = 5
    m_try: int | None = None
    seed: int = 0
    resample: str = "bootstrap"
    require_inbag: bool = True

    def __post_init__(self):
        if self.n_tree < 1:
            raise ValueError("n_tree must be at least 1")
        if self.t_c < 1:
            raise ValueError("t_c must be at least 1")
        if self.t_n is not None and self.t_n < 1:
            raise ValueError("t_n must be at least 1")
        if self.m_try is not None and self.m_try < 1:
            raise ValueError("m_try must be at least 1")
        if self.resample not in RESAMPLE_MODES:
            raise ValueError(f"resample must be one of {RESAMPLE_MODES}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned value")

    def resolved_m_try(self, D: int) -> int:
        m = max(1, D // 3) if self.m_try is None else self.m_try
        if not 1 <= m <= D:
            raise ValueError(f"m_try={m} outside 1..{D}")
        return m


@dataclass(eq=False)
class ForestModel:
    trees: list[TreeModel]
    params: ForestParams
    factor: PrecisionFactor | None = field(default=None, repr=False)

    def predict(self, X) -> np.ndarray:
        return predict_forest(self, X)

    def tree_predictions(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([t.predict(X) for t in self.trees])


def tree_rng(seed: int, t: int) -> np.random.Generator:
    """Independent stream for tree ``t``, keyed by ``(seed, t)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))


def draw_resample_counts(n: int, rng: np.random.Generator, mode: str = "bootstrap") -> np.ndarray:
    """How often each of ``n`` rows appears in a size-``n`` draw with replacement."""
    if n < 1:
        raise ValueError("n must be positive")
    if mode == "none":
        return np.ones(n, dtype=np.int64)
    if mode != "bootstrap":
        raise ValueError(f"unknown resample mode {mode!r}")
    return np.bincount(rng.integers(0, n, size=n), minlength=n)


def _fit_one(data: SpatialDataset, factor: PrecisionFactor, params: ForestParams, t: int, m_try: int) -> TreeModel:
    rng = tree_rng(params.seed, t)
    for attempt in range(2):
        counts = draw_resample_counts(data.n, rng, params.resample)
        op = resampled_precision(factor, counts)
        try:
            return grow_tree(data, op, params.t_n, params.t_c, m_try, rng, params.require_inbag)
        except DegeneratePartitionError:
            if attempt:
                raise
            logger.warning("tree %d: degenerate partition, redrawing once", t)
    raise AssertionError("unreachable")


def fit_forest(data: SpatialDataset, factor: PrecisionFactor | None, params: ForestParams,
               n_jobs: int = 1) -> ForestModel:
    """Fit ``params.n_tree`` GLS trees, one resampled precision operator each.

    ``factor=None`` uses the identity (plain random forest).  Results do not
    depend on ``n_jobs``.
    """
    if factor is None:
        factor = identity_factor(data.n)
    if factor.n != data.n:
        raise ValueError(f"factor size {factor.n} does not match data size {data.n}")
    m_try = params.resolved_m_try(data.D)
    if n_jobs > 1 and params.n_tree > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(lambda t: _fit_one(data, factor, params, t, m_try), range(params.n_tree)))
    else:
        trees = [_fit_one(data, factor, params, t, m_try) for t in range(params.n_tree)]
    return ForestModel(trees, params, factor)


def predict_forest(forest: ForestModel, X) -> np.ndarray:
    """Average of the tree predictions at every row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = np.zeros(X.shape[0])
    for tree in forest.trees:
        total += tree.predict(X)
    return total / len(forest.trees)


def write_forest(forest: ForestModel, path, include_factor: bool = True) -> None:
    lines = [MAGIC, "params " + json.dumps(asdict(forest.params), sort_keys=True), f"trees {len(forest.trees)}"]
    for tree in forest.trees:
        lines.extend(format_tree(tree))
    if include_factor and forest.factor is not None:
        lines.append(f"factor {forest.factor.n}")
        lines.extend(format_factor(forest.factor))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_forest(path) -> ForestModel:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: not an RF-GLS forest file (expected {MAGIC!r})")
    if not lines[1].startswith("params "):
        raise ValueError(f"{path}: missing params header")
    params = ForestParams(**json.loads(lines[1][len("params "):]))
    n_trees = int(lines[2].split()[1])
    pos = 3
    trees = []
    for _ in range(n_trees):
        count = int(lines[pos].split()[1].split("=")[1])
        trees.append(parse_tree(lines[pos : pos + count + 1]))
        pos += count + 1
    factor = None
    if pos < len(lines) and lines[pos].startswith("factor "):
        n = int(lines[pos].split()[1])
        factor = parse_factor(lines[pos + 1 : pos + 1 + n])
    return ForestModel(trees, params, factor)

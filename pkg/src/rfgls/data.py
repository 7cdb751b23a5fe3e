"""The ``(y, X, locations)`` dataset container and its CSV format."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["SpatialDataset", "DatasetFormatError", "read_dataset", "write_dataset", "read_points", "fmt"]


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


def fmt(x: float) -> str:
    """17-significant-digit decimal; round-trips every float64."""
    return f"{x:.17g}"


@dataclass(frozen=True, eq=False)
class SpatialDataset:
    """Responses ``y`` (n,), covariates ``X`` (n, D), locations (n, 1|2) or None."""

    y: np.ndarray
    X: np.ndarray
    locations: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("y and X must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        if self.locations is not None:
            loc = np.asarray(self.locations, dtype=float)
            if loc.ndim == 1:
                loc = loc[:, None]
            if loc.shape[0] != y.shape[0] or loc.shape[1] not in (1, 2):
                raise ValueError("locations must be (n, 1) or (n, 2)")
            if not np.all(np.isfinite(loc)):
                raise ValueError("locations must be finite")
            object.__setattr__(self, "locations", loc)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx)
        loc = None if self.locations is None else self.locations[idx]
        return SpatialDataset(self.y[idx], self.X[idx], loc)


def write_dataset(data: SpatialDataset, path) -> None:
    header = ["y"] + [f"x{d + 1}" for d in range(data.D)]
    if data.locations is not None:
        header += [f"loc{k + 1}" for k in range(data.locations.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [data.y[i], *data.X[i]]
            if data.locations is not None:
                row += list(data.locations[i])
            w.writerow([fmt(v) for v in row])


def _read_table(path, with_y: bool):
    lead = ["y"] if with_y else []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        if with_y and (not header or header[0] != "y"):
            raise DatasetFormatError(f"{path}: line 1: first column must be 'y'")
        rest = header[len(lead):]
        xcols = [h for h in rest if h.startswith("x")]
        lcols = [h for h in rest if h.startswith("loc")]
        expect = lead + [f"x{d + 1}" for d in range(len(xcols))] + [f"loc{k + 1}" for k in range(len(lcols))]
        if header != expect or not xcols or len(lcols) > 2:
            raise DatasetFormatError(f"{path}: line 1: bad header {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DatasetFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                raise DatasetFormatError(f"{path}: line {lineno}: non-numeric or missing value") from None
            if not all(np.isfinite(vals)):
                raise DatasetFormatError(f"{path}: line {lineno}: missing or nonfinite value")
            rows.append(vals)
    if not rows:
        raise DatasetFormatError(f"{path}: dataset has no rows")
    return np.asarray(rows, dtype=float), len(xcols), bool(lcols)


def read_dataset(path) -> SpatialDataset:
    """Parse a CSV with header ``y, x1..xD[, loc1[, loc2]]``."""
    arr, D, has_loc = _read_table(path, with_y=True)
    loc = arr[:, 1 + D :] if has_loc else None
    return SpatialDataset(arr[:, 0], arr[:, 1 : 1 + D], loc)


def read_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Parse query points with header ``x1..xD[, loc1[, loc2]]``."""
    arr, D, has_loc = _read_table(path, with_y=False)
    return arr[:, :D], (arr[:, D:] if has_loc else None)

"""Figures for the CLI report paths, rendered headless to PNG files."""
from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_figure2", "plot_bench", "figure_size"]

CART_COLOR = "#1f77b4"
DART_COLOR = "#8c564b"
MEAN_COLOR = "#ff7f0e"


def figure_size(width: float = 6.5, ratio: float | None = None) -> tuple[float, float]:
    """Width in inches; height follows the golden ratio unless given."""
    ratio = (math.sqrt(5) - 1) / 2 if ratio is None else ratio
    return width, width * ratio


def _band(ax, grid, curves, color, label):
    mean = curves.mean(axis=0)
    lo, hi = np.quantile(curves, [0.025, 0.975], axis=0)
    ax.fill_between(grid, lo, hi, color=color, alpha=0.25, lw=0)
    ax.plot(grid, mean, color=color, lw=1.5, label=label)


def plot_figure2(result, path) -> Path:
    """Criterion curves with 95% pointwise bands, and violins of the fitted split.

    ``result`` is a :class:`rfgls.simbench.Figure2Result`.
    """
    path = Path(path)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=figure_size(10, 0.42))
    _band(ax0, result.grid, result.cart_curves, CART_COLOR, "CART")
    _band(ax0, result.grid, result.dart_curves, DART_COLOR, "DART / alpha")
    ax0.set_xlabel("cutoff")
    ax0.set_ylabel("split criterion")
    ax0.legend(loc="upper left", frameon=False)
    twin = ax0.twinx()
    twin.step([0, 0.5, 1], [1, 1.5, 1.5], where="post", color=MEAN_COLOR, lw=1, ls="--")
    twin.set_ylabel("m(x)", color=MEAN_COLOR)
    twin.set_ylim(0.75, 1.75)

    rows = result.rows
    cols = {name: rows[:, k] for k, name in enumerate(result.COLUMNS)}
    groups = [("cutoff", "cart_cutoff", "dart_cutoff"), ("left", "cart_left", "dart_left"),
              ("right", "cart_right", "dart_right")]
    pos_c = np.arange(len(groups)) * 3.0
    parts_c = ax1.violinplot([cols[g[1]] for g in groups], positions=pos_c, showmedians=True)
    parts_d = ax1.violinplot([cols[g[2]] for g in groups], positions=pos_c + 1, showmedians=True)
    for parts, color in ((parts_c, CART_COLOR), (parts_d, DART_COLOR)):
        for body in parts["bodies"]:
            body.set_facecolor(color)
            body.set_alpha(0.5)
        for key in ("cbars", "cmins", "cmaxes", "cmedians"):
            parts[key].set_color(color)
    for ref, x in ((0.5, pos_c[0]), (1.0, pos_c[1]), (1.5, pos_c[2])):
        ax1.hlines(ref, x - 0.6, x + 1.6, color="0.4", lw=0.8, ls=":")
    ax1.set_xticks(pos_c + 0.5, [g[0] for g in groups])
    ax1.plot([], [], color=CART_COLOR, label="CART")
    ax1.plot([], [], color=DART_COLOR, label="DART")
    ax1.legend(frameon=False)
    ax1.set_ylabel("estimate")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_bench(records: Sequence, path) -> Path:
    """Boxplots of MISE and relative MSE per method (error rows skipped)."""
    path = Path(path)
    by_method: dict[str, dict[str, list[float]]] = defaultdict(lambda: {"mise": [], "relative_mse": []})
    order: list[str] = []
    for r in records:
        if r.error:
            continue
        if r.method not in order:
            order.append(r.method)
        for key in ("mise", "relative_mse"):
            v = getattr(r, key)
            if np.isfinite(v):
                by_method[r.method][key].append(v)
    fig, axes = plt.subplots(1, 2, figsize=figure_size(10, 0.42))
    for ax, key, label in ((axes[0], "mise", "MISE"), (axes[1], "relative_mse", "relative MSE")):
        data = [by_method[m][key] for m in order]
        keep = [k for k, d in enumerate(data) if d]
        if keep:
            ax.boxplot([data[k] for k in keep], showfliers=True)
            ax.set_xticks(np.arange(1, len(keep) + 1), [order[k] for k in keep], rotation=20)
        ax.set_ylabel(label)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path

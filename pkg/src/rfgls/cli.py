"""``rfgls`` command line: fit, predict, bench and figure2.

Exit status is 0 on success, 2 for malformed input (bad config, bad data
file, bad arguments) and 1 for failures while running.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .covmodel import CovarianceSpec
from .data import DatasetFormatError, SpatialDataset, fmt, read_dataset, read_points
from .forest import ForestParams, read_forest, write_forest
from .simbench import ExperimentConfig, Figure2Result, figure2_experiment, run_experiment
from .spatial import DEFAULT_BOUNDS, build_kriging_context, fit_pipeline, krige_predict

__all__ = ["main", "parse_dataset", "ConfigError", "BENCH_COLUMNS"]

logger = logging.getLogger("rfgls")

BENCH_COLUMNS = ("mean_kind", "sigma2", "phi", "tau2_frac", "n", "replicate", "method", "mise",
                 "relative_mse", "runtime_ms", "seed")
FIT_KEYS = {"forest", "stage1", "n_neighbors", "bounds", "oracle"}
SPEC_KEYS = {"kind", "sigma2", "phi", "nu", "tau2"}


class ConfigError(ValueError):
    """Malformed configuration (exit status 2)."""


def parse_dataset(path) -> SpatialDataset:
    return read_dataset(path)


# ---------------------------------------------------------------------------
# config parsing


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _check_keys(obj: dict, allowed, where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _resolve_seed(explicit: int | None, configured: int | None) -> int:
    if explicit is not None:
        return explicit
    if configured is not None:
        return configured
    env = os.environ.get("RFGLS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"RFGLS_SEED must be an integer, got {env!r}") from None


def _forest_params(obj, where: str, seed: int | None = None) -> ForestParams:
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: must be an object")
    _check_keys(obj, {f.name for f in fields(ForestParams)}, where)
    obj = dict(obj)
    obj["seed"] = _resolve_seed(seed, obj.get("seed"))
    try:
        return ForestParams(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _experiment_configs(obj: dict, seed: int | None) -> list[ExperimentConfig]:
    """One config per point of the (sigma2, phi, tau2_frac) grid; scalars count as one-point axes."""
    _check_keys(obj, {f.name for f in fields(ExperimentConfig)}, "bench config")
    obj = dict(obj)
    obj["forest"] = _forest_params(obj.get("forest"), "forest")
    obj["seed"] = _resolve_seed(seed, obj.get("seed"))
    if "methods" in obj:
        if not isinstance(obj["methods"], list):
            raise ConfigError("methods must be a list")
        obj["methods"] = tuple(obj["methods"])
    axes = {}
    for key in ("sigma2", "phi", "tau2_frac"):
        v = obj.pop(key, None)
        if v is None:
            continue
        axes[key] = v if isinstance(v, list) else [v]
        if not axes[key]:
            raise ConfigError(f"{key}: empty list")
    out = []
    for combo in itertools.product(*axes.values()):
        try:
            out.append(ExperimentConfig(**obj, **dict(zip(axes, combo))))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bench config: {exc}") from None
    return out


def _spec(obj, where: str) -> CovarianceSpec:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: must be an object")
    _check_keys(obj, SPEC_KEYS, where)
    try:
        return CovarianceSpec(**{"kind": "exponential", **obj})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(float(v))
    return str(v)


def cmd_fit(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, FIT_KEYS, "fit config")
    params = _forest_params(cfg.get("forest"), "forest", args.seed)
    stage1 = _forest_params(cfg["stage1"], "stage1", args.seed) if "stage1" in cfg else params
    bounds = tuple(cfg.get("bounds", DEFAULT_BOUNDS))
    if len(bounds) != 2 or not 0 < bounds[0] < bounds[1]:
        raise ConfigError("bounds must be [lo, hi] with 0 < lo < hi")
    n_neighbors = cfg.get("n_neighbors", 20)
    if not isinstance(n_neighbors, int) or n_neighbors < 1:
        raise ConfigError("n_neighbors must be a positive integer")
    oracle = _spec(cfg["oracle"], "oracle") if "oracle" in cfg else None
    data = parse_dataset(args.data)
    if data.locations is None:
        raise ConfigError(f"{args.data}: fit needs loc columns")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = fit_pipeline(data, params, stage1, bounds=bounds, n_neighbors=n_neighbors, oracle_spec=oracle,
                       n_jobs=args.threads)
    write_forest(res.forest, out / "forest.txt")
    with open(out / "fit_report.json", "w", encoding="utf-8") as fh:
        json.dump(res.report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    ctx = res.context
    with open(out / "kriging.json", "w", encoding="utf-8") as fh:
        json.dump({
            "spec": {"kind": ctx.spec.kind, "sigma2": ctx.spec.sigma2, "phi": ctx.spec.phi,
                     "nu": ctx.spec.nu, "tau2": ctx.spec.tau2},
            "locations": ctx.train_locations.tolist(),
            "residuals": ctx.residuals.tolist(),
        }, fh)
        fh.write("\n")
    print(json.dumps(res.report.to_json(), sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    try:
        forest = read_forest(args.model)
    except OSError as exc:
        raise ConfigError(f"cannot read model {args.model}: {exc.strerror}") from None
    except (ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"{args.model}: malformed forest file ({exc})") from None
    X, loc = read_points(args.points)
    D = forest.trees[0].feature.max() + 1 if forest.trees else 0
    if X.shape[1] < D:
        raise ConfigError(f"{args.points}: model uses {D} covariates, file has {X.shape[1]}")
    m_hat = forest.predict(X)
    header, cols = ["m_hat"], [m_hat]
    if args.kriging:
        kr = _load_json(args.kriging)
        _check_keys(kr, {"spec", "locations", "residuals"}, "kriging file")
        if loc is None:
            raise ConfigError(f"{args.points}: kriging needs loc columns")
        ctx = build_kriging_context(np.asarray(kr["locations"]), _spec(kr["spec"], "kriging spec"),
                                    np.asarray(kr["residuals"]))
        header.append("y_hat")
        cols.append(krige_predict(forest, ctx, X, loc))
    _write_rows(args.out, header, ([fmt(v) for v in row] for row in zip(*cols)))
    return 0


def cmd_bench(args) -> int:
    configs = _experiment_configs(_load_json(args.config), args.seed)
    records = []
    for cfg in configs:
        records.extend(run_experiment(cfg, n_workers=args.threads))
    rows, errors = [], []
    for r in records:
        rt = r.runtime_ms if args.timing else float("nan")
        rows.append([_cell(getattr(r, c)) if c != "runtime_ms" else fmt(rt) for c in BENCH_COLUMNS])
        if r.error:
            errors.append([r.mean_kind, fmt(r.sigma2), fmt(r.phi), fmt(r.tau2_frac), str(r.replicate), r.method,
                           r.error])
    _write_rows(args.out, BENCH_COLUMNS, rows)
    err_path = Path(str(args.out) + ".errors.csv")
    if errors:
        _write_rows(err_path, ("mean_kind", "sigma2", "phi", "tau2_frac", "replicate", "method", "error"), errors)
        print(f"{len(errors)} failed rows, see {err_path}", file=sys.stderr)
    if args.plot and records:
        from .plotting import plot_bench

        png = plot_bench(records, Path(args.out).with_suffix(".png"))
        print(f"wrote {png}", file=sys.stderr)
    return 0


def cmd_figure2(args) -> int:
    seed = _resolve_seed(args.seed, None)
    if args.replicates < 1 or args.n < 4:
        raise ConfigError("need --replicates >= 1 and --n >= 4")
    res: Figure2Result = figure2_experiment(args.replicates, seed, n=args.n)
    rows = [[str(int(r[0]))] + [fmt(v) for v in r[1:]] for r in res.rows]
    _write_rows(args.out, Figure2Result.COLUMNS, rows)
    sd = res.rows[:, 1:3].std(axis=0, ddof=1) if args.replicates > 1 else [float("nan")] * 2
    print(f"cutoff sd: cart={fmt(sd[0])} dart={fmt(sd[1])}")
    if args.plot:
        from .plotting import plot_figure2

        png = plot_figure2(res, Path(args.out).with_suffix(".png"))
        print(f"wrote {png}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfgls", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="two-stage RF-GLS fit on a dataset CSV")
    f.add_argument("--config", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="predict from a fitted forest")
    q.add_argument("--model", required=True)
    q.add_argument("--points", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--kriging", help="kriging.json written by fit")
    q.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="simulation benchmark")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--threads", type=int, default=1, help="worker processes over replicates")
    b.add_argument("--timing", action="store_true", help="record wall-clock runtime_ms (not reproducible)")
    b.add_argument("--plot", action="store_true", help="also write boxplots next to the CSV")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("figure2", help="CART versus DART root split on the step function")
    g.add_argument("--out", required=True)
    g.add_argument("--replicates", type=int, default=100)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--plot", action="store_true", help="also write the two-panel figure next to the CSV")
    g.set_defaults(func=cmd_figure2)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("rfgls: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"rfgls: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"rfgls: error: {exc.filename}: no such file", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"rfgls: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

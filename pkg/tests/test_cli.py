import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rfgls.cli import BENCH_COLUMNS, main
from rfgls.data import SpatialDataset, write_dataset


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(0)
    n = 60
    X = rng.random((n, 2))
    loc = rng.random((n, 2))
    y = 10 * np.sin(np.pi * X[:, 0]) + np.sin(6 * loc[:, 0]) + 0.3 * rng.normal(size=n)
    p = tmp_path / "data.csv"
    write_dataset(SpatialDataset(y, X, loc), p)
    return p


FIT_CFG = {"forest": {"n_tree": 4, "t_c": 5}, "n_neighbors": 5}
BENCH_CFG = {"n": 50, "replicates": 1, "eval_points": 20, "forest": {"n_tree": 2}}


class TestFitPredict:
    def test_fit_then_predict(self, tmp_path, dataset, capsys):
        cfg = write_json(tmp_path / "fit.json", FIT_CFG)
        out = tmp_path / "model"
        assert main(["fit", "--config", str(cfg), "--data", str(dataset), "--out", str(out), "--seed", "3"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) == {"sigma2", "phi", "tau2", "nll", "iterations", "converged"}
        assert json.loads((out / "fit_report.json").read_text()) == report
        pts = tmp_path / "pts.csv"
        pts.write_text("x1,x2,loc1,loc2\n0.5,0.5,0.2,0.2\n0.1,0.9,0.7,0.3\n")
        pred = tmp_path / "pred.csv"
        assert main(["predict", "--model", str(out / "forest.txt"), "--points", str(pts), "--out", str(pred),
                     "--kriging", str(out / "kriging.json")]) == 0
        rows = read_csv(pred)
        assert rows[0] == ["m_hat", "y_hat"] and len(rows) == 3
        assert all(np.isfinite(float(v)) for row in rows[1:] for v in row)

    def test_fit_deterministic(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "fit.json", FIT_CFG)
        for name in ("a", "b"):
            assert main(["fit", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "forest.txt").read_bytes() == (tmp_path / "b" / "forest.txt").read_bytes()

    def test_threads_do_not_change_output(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "fit.json", FIT_CFG)
        main(["fit", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "a")])
        main(["fit", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "b"), "--threads", "3"])
        assert (tmp_path / "a" / "forest.txt").read_bytes() == (tmp_path / "b" / "forest.txt").read_bytes()

    def test_oracle_config(self, tmp_path, dataset, capsys):
        cfg = write_json(tmp_path / "fit.json", {**FIT_CFG, "oracle": {"sigma2": 1.0, "phi": 3.0, "tau2": 0.1}})
        assert main(["fit", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "m")]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert (rep["sigma2"], rep["iterations"]) == (1.0, 0)

    def test_unknown_key_exit2(self, tmp_path, dataset, capsys):
        cfg = write_json(tmp_path / "fit.json", {"forest": {"n_trees": 4}})
        assert main(["fit", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "m")]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_bad_data_exit2_names_line(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "fit.json", FIT_CFG)
        bad = tmp_path / "bad.csv"
        bad.write_text("y,x1,loc1\n1,2,3\n1,,3\n")
        assert main(["fit", "--config", str(cfg), "--data", str(bad), "--out", str(tmp_path / "m")]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_missing_file_exit2(self, tmp_path):
        assert main(["predict", "--model", str(tmp_path / "nope.txt"), "--points", str(tmp_path / "p.csv"),
                     "--out", str(tmp_path / "o.csv")]) == 2

    def test_runtime_failure_exit1(self, tmp_path, capsys):
        # too few rows for the covariance estimate
        p = tmp_path / "small.csv"
        write_dataset(SpatialDataset(np.arange(5.0), np.random.default_rng(0).random((5, 1)),
                                     np.random.default_rng(1).random((5, 2))), p)
        cfg = write_json(tmp_path / "fit.json", FIT_CFG)
        assert main(["fit", "--config", str(cfg), "--data", str(p), "--out", str(tmp_path / "m")]) == 1
        assert "EstimationError" in capsys.readouterr().err


class TestBench:
    def test_zero_replicates_header_only(self, tmp_path):
        cfg = write_json(tmp_path / "b.json", {**BENCH_CFG, "replicates": 0})
        out = tmp_path / "r.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        assert out.read_text() == ",".join(BENCH_COLUMNS) + "\n"

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_json(tmp_path / "b.json", BENCH_CFG)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(a), "--seed", "4"]) == 0
        assert main(["bench", "--config", str(cfg), "--out", str(b), "--seed", "4", "--threads", "2"]) == 0
        assert a.read_bytes() == b.read_bytes()
        rows = read_csv(a)
        assert rows[0] == list(BENCH_COLUMNS) and len(rows) == 5
        assert {r[6] for r in rows[1:]} == {"RF", "RF-RK", "RF-GLS", "RF-GLS-oracle"}
        assert all(r[9] == "nan" for r in rows[1:])

    def test_grid_expansion_and_plot(self, tmp_path):
        cfg = write_json(tmp_path / "b.json", {**BENCH_CFG, "sigma2": [1, 5], "methods": ["RF", "RF-GLS"]})
        out = tmp_path / "r.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(out), "--plot", "--timing"]) == 0
        rows = read_csv(out)
        assert [r[1] for r in rows[1:]] == ["1", "1", "5", "5"]
        assert all(float(r[9]) > 0 for r in rows[1:])
        assert (tmp_path / "r.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_env_seed(self, tmp_path, monkeypatch):
        cfg = write_json(tmp_path / "b.json", {**BENCH_CFG, "methods": ["RF"]})
        monkeypatch.setenv("RFGLS_SEED", "9")
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "env.csv")])
        monkeypatch.delenv("RFGLS_SEED")
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "flag.csv"), "--seed", "9"])
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "zero.csv")])
        assert (tmp_path / "env.csv").read_bytes() == (tmp_path / "flag.csv").read_bytes()
        assert (tmp_path / "env.csv").read_bytes() != (tmp_path / "zero.csv").read_bytes()

    def test_error_rows_sidecar(self, tmp_path):
        cfg = write_json(tmp_path / "b.json", {**BENCH_CFG, "n": 8, "holdout": "none"})
        out = tmp_path / "r.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        errs = read_csv(tmp_path / "r.csv.errors.csv")
        assert {r[5] for r in errs[1:]} == {"RF-RK", "RF-GLS"}

    @pytest.mark.parametrize("cfg", [{"replicates": "x"}, {"bogus": 1}, {"methods": "RF"}, {"sigma2": []}])
    def test_bad_configs_exit2(self, tmp_path, cfg):
        p = write_json(tmp_path / "b.json", {**BENCH_CFG, **cfg})
        assert main(["bench", "--config", str(p), "--out", str(tmp_path / "r.csv")]) == 2

    def test_invalid_json_exit2(self, tmp_path):
        p = tmp_path / "b.json"
        p.write_text("{not json")
        assert main(["bench", "--config", str(p), "--out", str(tmp_path / "r.csv")]) == 2


class TestFigure2:
    def test_csv_and_plot(self, tmp_path, capsys):
        out = tmp_path / "f2.csv"
        assert main(["figure2", "--out", str(out), "--replicates", "4", "--n", "50", "--plot"]) == 0
        rows = read_csv(out)
        assert rows[0] == ["replicate", "cart_cutoff", "dart_cutoff", "cart_left", "cart_right", "dart_left",
                           "dart_right"]
        assert len(rows) == 5
        assert "cutoff sd" in capsys.readouterr().out
        assert (tmp_path / "f2.png").exists()

    def test_bad_args(self, tmp_path):
        assert main(["figure2", "--out", str(tmp_path / "f.csv"), "--replicates", "0"]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "rfgls", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "figure2" in r.stdout
    r = subprocess.run([sys.executable, "-m", "rfgls", "fit"], capture_output=True, text=True)
    assert r.returncode == 2

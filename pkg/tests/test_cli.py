"""End-to-end CLI runs: reports, determinism, and error codes."""

import json
import os

import numpy as np
import pytest

from otgmm.cli import main
from otgmm.models import Dataset
from otgmm.special import norm_ppf


def _write_iv_csv(path, n=400, theta=(0.5, 1.0), seed=314):
    """Synthetic instrumented regression with known coefficients, no
    endogeneity, and a dummy control column."""
    rng = np.random.default_rng(seed)
    w1 = norm_ppf(rng.random(n))
    w2 = norm_ppf(rng.random(n))
    p1 = 0.9 * w1 + 0.4 * w2 + 0.5 * norm_ppf(rng.random(n))
    p2 = 0.6 * w2 - 0.3 * w1 + 0.5 * norm_ppf(rng.random(n))
    d = (rng.random(n) < 0.4).astype(float)
    y = theta[0] * p1 + theta[1] * p2 + 0.3 * d + 0.5 * norm_ppf(rng.random(n))
    cols = np.column_stack([y, p1, p2, d, w1, w2])
    names = ("y", "p1", "p2", "d", "w1", "w2")
    lines = [",".join(names)]
    for row in cols:
        lines.append(",".join(format(v, ".17g") for v in row))
    path.write_text("\n".join(lines) + "\n")
    return names


def _config(tmp_path, **overrides):
    cfg = {
        "data": str(tmp_path / "data.csv"),
        "model": {"type": "linear_iv", "y": "y", "r": ["p1", "p2", "d"],
                  "w": ["d", "w1", "w2"], "intercept": True},
        "method": "otgmm",
        "constraint": {"auto_dummies": True},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestEstimate:
    def test_recovers_known_coefficients(self, tmp_path, capsys):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path)
        out = tmp_path / "out"
        assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        coefs = report["coefficients"]
        truth = {"p1": 0.5, "p2": 1.0, "d": 0.3}
        for name, true_val in truth.items():
            est, se = coefs[name]["estimate"], coefs[name]["se"]
            assert abs(est - true_val) <= 3.0 * se, (name, est, se)
        assert report["test"]["pvalue"] > 0.01
        assert (out / "report.txt").exists()

    def test_constrained_columns_have_zero_correction(self, tmp_path):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path, constraint={"error_free": ["w1"],
                                            "auto_dummies": True})
        out = tmp_path / "out"
        assert main(["estimate", "--config", str(cfg), "--out", str(out),
                     "--method", "otgmm"]) == 0
        report = json.loads((out / "report.json").read_text())
        sd = report["error_sd_report"]
        assert sd["w1"]["sd_correction"] == 0.0
        assert sd["d"]["sd_correction"] == 0.0          # auto-detected dummy
        assert sd["const"]["sd_correction"] == 0.0      # intercept column
        assert sd["p1"]["sd_correction"] > 0.0

    def test_just_identified_matches_iv_solution(self, tmp_path):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path, model={"type": "linear_iv", "y": "y",
                                       "r": ["p1", "p2"], "w": ["w1", "w2"],
                                       "intercept": False},
                      constraint={})
        out = tmp_path / "out"
        assert main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["qhat"] == pytest.approx(0.0, abs=1e-10)
        # method-of-moments solution of the exactly identified system
        data = Dataset.from_csv(tmp_path / "data.csv")
        W = np.column_stack([data.column("w1"), data.column("w2")])
        R = np.column_stack([data.column("p1"), data.column("p2")])
        theta_iv = np.linalg.solve(W.T @ R, W.T @ data.column("y"))
        np.testing.assert_allclose(report["theta_hat"], theta_iv, atol=1e-7)

    def test_method_override_and_all_methods_run(self, tmp_path):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path)
        for method in ("linearized_otgmm", "efficient_gmm", "otgmm_joint_foc"):
            out = tmp_path / f"out_{method}"
            code = main(["estimate", "--config", str(cfg), "--out", str(out),
                         "--method", method])
            assert code == 0, method
            report = json.loads((out / "report.json").read_text())
            assert report["method"] == method

    def test_reruns_byte_identical(self, tmp_path):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["estimate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["estimate", "--config", str(cfg), "--out", str(out2)]) == 0
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
        assert (out1 / "report.txt").read_bytes() == (out2 / "report.txt").read_bytes()


class TestErrorPaths:
    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["estimate", "--config", str(tmp_path / "nope.json")]) == 2
        err = capsys.readouterr().err.splitlines()[0]
        assert err.startswith("otgmm-error code=2 kind=config")

    def test_bad_method_is_config_error(self, tmp_path, capsys):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path, method="nope")
        assert main(["estimate", "--config", str(cfg)]) == 2

    def test_unknown_column_is_config_error(self, tmp_path):
        _write_iv_csv(tmp_path / "data.csv")
        cfg = _config(tmp_path, model={"type": "linear_iv", "y": "y",
                                       "r": ["ghost"], "w": ["w1"]})
        assert main(["estimate", "--config", str(cfg)]) == 2

    def test_missing_data_file_is_data_error(self, tmp_path, capsys):
        cfg = _config(tmp_path, data=str(tmp_path / "ghost.csv"))
        assert main(["estimate", "--config", str(cfg)]) == 3
        err = capsys.readouterr().err.splitlines()[0]
        assert "kind=data" in err

    def test_malformed_csv_is_data_error(self, tmp_path):
        (tmp_path / "data.csv").write_text("y,p1,p2,d,w1,w2\n1,2,3,4,5,\n")
        cfg = _config(tmp_path)
        assert main(["estimate", "--config", str(cfg)]) == 3

    def test_solver_failure_exit_code(self, tmp_path, capsys):
        _write_iv_csv(tmp_path / "data.csv", n=60)
        cfg = _config(tmp_path, solver={"max_iter": 1, "eps_z": 1e-14,
                                        "eps_lambda": 1e-14})
        assert main(["estimate", "--config", str(cfg)]) == 4
        err = capsys.readouterr().err.splitlines()[0]
        assert "kind=solver" in err


class TestSimulate:
    def _sim_config(self, tmp_path, workers=1, reps=10):
        cfg = {
            "dgps": [{"id": "exponential_sq", "latent": "exponential",
                      "sigmas": [0.0, 1.0], "n": 30}],
            "estimators": ["linearized_otgmm", "efficient_gmm"],
            "replications": reps,
            "master_seed": 1,
            "workers": workers,
        }
        path = tmp_path / "sim.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_report_files_written(self, tmp_path):
        cfg = self._sim_config(tmp_path)
        out = tmp_path / "sim_out"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        for name in ("report.csv", "report_wide.csv", "report.json"):
            assert (out / name).exists(), name
        payload = json.loads((out / "report.json").read_text())
        assert payload["master_seed"] == 1
        assert len(payload["cells"]) == 4      # 2 sigmas x 2 estimators

    def test_repeat_runs_byte_identical(self, tmp_path):
        cfg = self._sim_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
        for name in ("report.csv", "report_wide.csv", "report.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_worker_override_preserves_bytes(self, tmp_path):
        cfg = self._sim_config(tmp_path)
        out1, out2 = tmp_path / "w1", tmp_path / "w2"
        assert main(["simulate", "--config", str(cfg), "--out", str(out1),
                     "--workers", "1"]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out2),
                     "--workers", "2"]) == 0
        for name in ("report.csv", "report_wide.csv", "report.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_bad_study_config(self, tmp_path):
        path = tmp_path / "sim.json"
        path.write_text(json.dumps({"dgps": [{"id": "nope", "latent": "normal"}]}))
        assert main(["simulate", "--config", str(path)]) == 2

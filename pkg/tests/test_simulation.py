"""Data-generating processes and the Monte Carlo study harness."""

import numpy as np
import pytest

from otgmm.dgps import (DGP_IDS, DgpSpec, THETA0, dgp_model, sample_dgp,
                        sample_latent)
from otgmm.simulation import StudyConfig, run_study


class TestLatentLaws:
    def test_population_moments(self):
        rng = np.random.default_rng(1)
        n = 100_000
        # (law, mean, variance)
        targets = (("normal", 1.5, 2.0), ("uniform", 1.5, 1.0 / 12.0),
                   ("binomial", 1.5, 1.05), ("exponential", 1.5, 2.25))
        for law, mean, var in targets:
            z = sample_latent(law, n, rng)
            se_mean = 3.0 * np.sqrt(var / n)
            assert abs(z.mean() - mean) < max(se_mean, 0.01), law
            assert abs(z.var() - var) < 6.0 * var / np.sqrt(n) + 0.01, law

    def test_exponential_second_moment_matches_design(self):
        # the squared-moment design requires E[z^2] = 2 * theta0^2
        rng = np.random.default_rng(2)
        z = sample_latent("exponential", 200_000, rng)
        assert np.mean(z ** 2) == pytest.approx(2 * THETA0 ** 2, rel=0.02)

    def test_sigma_zero_is_pure_latent(self):
        spec = DgpSpec("normal_exp", "uniform", 0.0, 50_000)
        data = sample_dgp(spec, np.random.default_rng(3))
        x = data.values[:, 0]
        assert x.min() >= 1.0 and x.max() <= 2.0
        assert abs(x.mean() - 1.5) < 0.01

    def test_determinism_across_calls(self):
        spec = DgpSpec("normal_logistic", "binomial", 0.7, 200)
        a = sample_dgp(spec, np.random.default_rng(11)).values
        b = sample_dgp(spec, np.random.default_rng(11)).values
        np.testing.assert_array_equal(a, b)


class TestDgpSpecs:
    def test_pairing_restrictions(self):
        with pytest.raises(ValueError, match="not paired"):
            DgpSpec("exponential_sq", "normal", 0.0, 10)
        with pytest.raises(ValueError, match="not paired"):
            DgpSpec("normal_exp", "exponential", 0.0, 10)
        DgpSpec("exponential_sq", "exponential", 0.0, 10)

    def test_validation(self):
        with pytest.raises(ValueError):
            DgpSpec("normal_exp", "normal", -0.1, 10)
        with pytest.raises(ValueError):
            DgpSpec("normal_exp", "normal", 0.0, 1)
        with pytest.raises(ValueError):
            DgpSpec("nope", "normal", 0.0, 10)

    def test_unknown_model_id(self):
        with pytest.raises(ValueError):
            dgp_model("nope")


class TestDgpModels:
    def test_squared_design_point_values(self):
        model = dgp_model("exponential_sq")
        g = model.eval_g(np.array([1.5]), np.array([1.5]))
        np.testing.assert_allclose(g, [0.0, 1.5 ** 2 - 4.5])
        assert g[1] == pytest.approx(-2.25)

    def test_squared_design_population_root(self):
        rng = np.random.default_rng(4)
        z = sample_latent("exponential", 200_000, rng)
        model = dgp_model("exponential_sq")
        gbar = model.eval_g(z[:, None], np.array([1.5])).mean(axis=0)
        assert np.linalg.norm(gbar) < 0.03

    def test_level_moment_vanishes_in_sample_at_theta0(self):
        # self-normalized designs satisfy the level moment exactly at 1.5
        rng = np.random.default_rng(5)
        for dgp_id in ("normal_exp", "normal_logistic", "exp_logistic"):
            spec = DgpSpec(dgp_id, "normal", 1.0, 300)
            data = sample_dgp(spec, rng)
            model = dgp_model(dgp_id, data)
            gbar = model.eval_g(data.values, np.array([1.5])).mean(axis=0)
            if dgp_id == "exp_logistic":
                np.testing.assert_allclose(gbar, 0.0, atol=1e-12)
            else:
                assert abs(gbar[1]) < 1e-12

    def test_unique_population_root_on_grid(self):
        # coarse scan of ||E-hat g|| over [0, 3]: single zero near 1.5
        rng = np.random.default_rng(6)
        spec = DgpSpec("normal_exp", "normal", 0.0, 100_000)
        data = sample_dgp(spec, rng)
        model = dgp_model("normal_exp", data)
        grid = np.linspace(0.0, 3.0, 301)
        norms = np.array([
            np.linalg.norm(model.eval_g(data.values, np.array([t])).mean(axis=0))
            for t in grid])
        near = norms < 0.02 * norms.max()
        assert near.any()
        assert abs(grid[np.argmin(norms)] - 1.5) < 0.02
        # the small-norm region is a single interval around 1.5
        idx = np.flatnonzero(near)
        assert idx.max() - idx.min() == len(idx) - 1


class TestRunStudy:
    @pytest.fixture(scope="class")
    def small_config(self):
        return StudyConfig(
            dgps=(DgpSpec("exponential_sq", "exponential", 0.0, 40),
                  DgpSpec("exponential_sq", "exponential", 1.0, 40)),
            estimators=("linearized_otgmm", "efficient_gmm"),
            replications=12, master_seed=33, parallel_workers=1)

    def test_worker_count_invariance(self, small_config):
        serial = run_study(small_config)
        parallel = run_study(StudyConfig(
            dgps=small_config.dgps, estimators=small_config.estimators,
            replications=small_config.replications,
            master_seed=small_config.master_seed, parallel_workers=2))
        assert serial.rows == parallel.rows
        assert serial.to_csv_text() == parallel.to_csv_text()
        assert serial.to_json_text() == parallel.to_json_text()

    def test_rmse_identity(self, small_config):
        report = run_study(small_config)
        for row in report.rows:
            assert row["rmse"] ** 2 == pytest.approx(
                row["bias"] ** 2 + row["sd"] ** 2, rel=1e-10)
            assert row["failures"] == 0

    def test_single_replication_degenerate_stats(self):
        config = StudyConfig(
            dgps=(DgpSpec("exponential_sq", "exponential", 0.5, 30),),
            estimators=("linearized_otgmm",), replications=1, master_seed=9)
        report = run_study(config)
        row = report.rows[0]
        assert row["sd"] == 0.0
        assert row["rmse"] == pytest.approx(abs(row["bias"]), rel=1e-12)

    def test_same_draws_for_every_estimator(self):
        # data streams depend on (seed, cell, replication) only, so adding an
        # estimator must not change the draws seen by the others
        base = StudyConfig(dgps=(DgpSpec("exponential_sq", "exponential", 0.5, 30),),
                           estimators=("linearized_otgmm",), replications=6,
                           master_seed=4)
        wide = StudyConfig(dgps=base.dgps,
                           estimators=("linearized_otgmm", "efficient_gmm"),
                           replications=6, master_seed=4)
        a = run_study(base).cell("exponential_sq", "exponential", 0.5,
                                 "linearized_otgmm")
        b = run_study(wide).cell("exponential_sq", "exponential", 0.5,
                                 "linearized_otgmm")
        assert a["bias"] == b["bias"] and a["sd"] == b["sd"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            StudyConfig(dgps=(), replications=3)
        with pytest.raises(ValueError):
            StudyConfig(dgps=(DgpSpec("normal_exp", "normal", 0.0, 10),),
                        estimators=("nope",))
        with pytest.raises(ValueError):
            StudyConfig(dgps=(DgpSpec("normal_exp", "normal", 0.0, 10),),
                        replications=0)

    def test_serialization_layout(self, small_config):
        report = run_study(small_config)
        csv_text = report.to_csv_text()
        header = csv_text.splitlines()[0].split(",")
        assert header[:5] == ["dgp_id", "latent", "sigma", "n", "estimator"]
        assert len(csv_text.splitlines()) == 1 + len(report.rows)
        wide = report.to_wide_text()
        assert "# exponential_sq | latent=exponential | n=40" in wide
        assert "linearized_otgmm,bias" in wide

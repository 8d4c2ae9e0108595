"""Outer estimators: degeneracies, cross-characterizations, and baselines."""

import numpy as np
import pytest

from otgmm._linalg import inv_checked
from otgmm.dgps import DgpSpec, dgp_model, sample_dgp
from otgmm.estimators import (EstimationError, estimate_efficient_gmm,
                              estimate_linearized, estimate_otgmm,
                              solve_joint_foc)
from otgmm.models import (Dataset, ErrorConstraint, MomentModel,
                          make_coordinate_mean_model, make_mean_model,
                          make_square_model)


class TestMeanModelDegeneracies:
    def test_otgmm_recovers_sample_mean(self, mean_data):
        res = estimate_otgmm(make_mean_model(), mean_data)
        assert res.theta_hat[0] == pytest.approx(2.0, abs=1e-8)
        assert np.linalg.norm(res.lambda_hat) <= 1e-8
        assert res.qhat <= 1e-16
        np.testing.assert_allclose(res.z_hat, mean_data.values, atol=1e-8)

    def test_linearized_recovers_sample_mean(self, mean_data):
        res = estimate_linearized(make_mean_model(), mean_data)
        assert res.theta_hat[0] == pytest.approx(2.0, abs=1e-8)

    def test_joint_foc_mean_model(self, mean_data):
        res = solve_joint_foc(make_mean_model(), mean_data)
        assert res.theta_hat[0] == pytest.approx(2.0, abs=1e-9)
        assert res.lambda_hat == pytest.approx([0.0], abs=1e-9)

    def test_covariance_is_sample_variance_over_n(self, rng):
        data = Dataset(rng.standard_normal((60, 1)), ("x",))
        res = estimate_otgmm(make_mean_model(), data)
        expected = np.var(data.values[:, 0] - res.theta_hat[0]) / data.n
        assert res.cov[0, 0] == pytest.approx(expected, rel=1e-6)


class TestJustIdentified:
    def test_square_model_solves_moment_exactly(self, rng):
        data = Dataset(1.0 + 0.3 * rng.standard_normal((25, 1)), ("x",))
        root = float(np.mean(data.values ** 2))
        for estimator in (estimate_otgmm, estimate_linearized):
            res = estimator(make_square_model(), data, theta_init=np.array([root]))
            assert res.theta_hat[0] == pytest.approx(root, abs=1e-6)
        res = estimate_otgmm(make_square_model(), data, theta_init=np.array([root]))
        assert res.qhat <= 1e-10
        assert np.linalg.norm(res.lambda_hat) <= 1e-6

    def test_efficient_gmm_weighting_irrelevant(self, rng):
        data = Dataset(1.0 + 0.3 * rng.standard_normal((25, 1)), ("x",))
        root = float(np.mean(data.values ** 2))
        res = estimate_efficient_gmm(make_square_model(), data,
                                     theta_init=np.array([root]))
        assert res.theta_hat[0] == pytest.approx(root, abs=1e-7)


class TestEfficientGMM:
    def test_two_step_matches_closed_form_gls(self, rng):
        # two location moments with unequal variances: the second step is a
        # generalized least squares average, solvable in closed form
        n = 400
        values = rng.standard_normal((n, 2)) * np.array([1.0, 2.0])
        data = Dataset(values, ("a", "b"))
        model = make_coordinate_mean_model(2)
        res = estimate_efficient_gmm(model, data)

        xbar = values.mean(axis=0)
        theta1 = xbar.mean()                         # identity-weight step
        G = values - theta1
        W = inv_checked(G.T @ G / n)
        ones = np.ones(2)
        expected = float(ones @ W @ xbar / (ones @ W @ ones))
        assert res.theta_hat[0] == pytest.approx(expected, abs=1e-7)
        cov_expected = 1.0 / (ones @ W @ ones) / n
        assert res.cov[0, 0] == pytest.approx(cov_expected, rel=1e-6)

    def test_weights_favor_precise_coordinate(self, rng):
        n = 2000
        values = rng.standard_normal((n, 2)) * np.array([1.0, 2.0])
        data = Dataset(values, ("a", "b"))
        res = estimate_efficient_gmm(make_coordinate_mean_model(2), data)
        xbar = values.mean(axis=0)
        gls = (xbar[0] / 1.0 + xbar[1] / 4.0) / (1.0 + 0.25)
        assert res.theta_hat[0] == pytest.approx(gls, abs=0.01)


class TestJointFocAgreement:
    @pytest.mark.parametrize("dgp_id,latent", [
        ("normal_exp", "normal"),
        ("exponential_sq", "exponential"),
    ])
    def test_reproduces_nested_estimate(self, dgp_id, latent):
        rng = np.random.default_rng(99)
        spec = DgpSpec(dgp_id, latent, 0.5, 40)
        data = sample_dgp(spec, rng)
        model = dgp_model(dgp_id, data)
        nested = estimate_otgmm(model, data, compute_cov=False)
        joint = solve_joint_foc(model, data,
                                theta_init=nested.theta_hat,
                                lambda_init=nested.lambda_hat,
                                compute_cov=False)
        assert "newton_fallback" not in joint.diagnostics
        assert joint.theta_hat[0] == pytest.approx(nested.theta_hat[0], abs=1e-6)
        np.testing.assert_allclose(joint.lambda_hat, nested.lambda_hat, atol=1e-6)

    def test_agreement_on_random_small_instances(self):
        rng = np.random.default_rng(123)
        hits = 0
        for k in range(8):
            n = int(rng.integers(10, 25))
            spec = DgpSpec("exponential_sq", "exponential", 0.3, n)
            data = sample_dgp(spec, rng)
            model = dgp_model("exponential_sq", data)
            try:
                nested = estimate_otgmm(model, data, compute_cov=False)
                joint = solve_joint_foc(model, data, theta_init=nested.theta_hat,
                                        lambda_init=nested.lambda_hat,
                                        compute_cov=False)
            except EstimationError:
                continue
            if "newton_fallback" in joint.diagnostics:
                continue
            assert joint.theta_hat[0] == pytest.approx(nested.theta_hat[0], abs=1e-5)
            hits += 1
        assert hits >= 5

    def test_fallback_reports(self, mean_data):
        # an absurd start forces the line search to bail out to the nested path
        def g(Z, theta):
            return np.hstack([Z - theta[0], np.exp(Z) - theta[0] * np.mean(np.exp(mean_data.values))])

        model = MomentModel(name="tricky", d_g=2, d_x=1, d_theta=1, g=g)
        res = solve_joint_foc(model, mean_data, theta_init=np.array([250.0]),
                              lambda_init=np.array([80.0, -90.0]))
        assert res.method == "otgmm_joint_foc"
        # either Newton made it or the fallback is recorded; both are valid
        if "newton_fallback" in res.diagnostics:
            assert isinstance(res.diagnostics["newton_fallback"], str)


class TestSmallErrorAgreement:
    def test_estimates_collapse_as_error_shrinks(self):
        # the latent sample is centered so both moments share a root at
        # sigma = 0; the transport magnitude is then governed by sigma alone
        # and the first-order equivalence shows its quadratic gap
        rng = np.random.default_rng(42)
        spec0 = DgpSpec("normal_exp", "normal", 0.0, 80)
        z = sample_dgp(spec0, rng).values[:, 0]
        z = z - z.mean() + 1.5
        e = rng.standard_normal(80)
        gaps = []
        for sigma in (0.2, 0.1, 0.05):
            data = Dataset((z + sigma * e)[:, None], ("x",))
            model = dgp_model("normal_exp", data)
            ot = estimate_otgmm(model, data, compute_cov=False)
            lin = estimate_linearized(model, data, compute_cov=False)
            gaps.append(abs(ot.theta_hat[0] - lin.theta_hat[0]))
        assert gaps[2] < gaps[1] < gaps[0]
        assert gaps[2] < 0.3 * gaps[0]


class TestConstraints:
    def test_zero_row_constraint_matches_unconstrained(self, rng):
        spec = DgpSpec("normal_exp", "normal", 0.5, 30)
        data = sample_dgp(spec, np.random.default_rng(5))
        model = dgp_model("normal_exp", data)
        empty = ErrorConstraint(np.zeros((0, 1)))
        a = estimate_otgmm(model, data, compute_cov=False)
        b = estimate_otgmm(model, data, constraint=empty, compute_cov=False)
        assert abs(a.theta_hat[0] - b.theta_hat[0]) <= 1e-10
        assert abs(a.qhat - b.qhat) <= 1e-10 * (1 + a.qhat)


class TestFailureModes:
    def test_all_probes_failing_raises(self, mean_data):
        def g(Z, theta):
            return np.full((Z.shape[0], 1), np.nan)

        model = MomentModel(name="nan", d_g=1, d_x=1, d_theta=1, g=g)
        with pytest.raises(EstimationError):
            estimate_linearized(model, mean_data)

    def test_determinism(self, rng):
        spec = DgpSpec("exponential_sq", "exponential", 0.5, 30)
        data = sample_dgp(spec, np.random.default_rng(77))
        model = dgp_model("exponential_sq", data)
        a = estimate_otgmm(model, data, compute_cov=False)
        b = estimate_otgmm(model, data, compute_cov=False)
        assert a.theta_hat[0] == b.theta_hat[0]
        assert a.qhat == b.qhat

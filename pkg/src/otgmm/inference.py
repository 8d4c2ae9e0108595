"""Asymptotic covariance estimation and the error-absence test.

Two regimes are covered.  The small-error sandwich treats the estimator as
GMM with the moment-sensitivity Gram matrix as weighting.  The large-error
regime works through the just-identified reformulation in the augmented
parameter (theta, lambda): per-observation stacked moments

    gtilde_i = [ G(q_i, theta)' lambda ,  g(q_i, theta) ]

with q_i the implicit transport map, their covariance Omega, and the
derivative matrix Gtilde assembled from the implicit-function derivatives of
q.  Under the no-error null the top block of gtilde is degenerate (it is
pinned to zero by the first-order condition), which makes Omega singular
exactly where the test matters; the implementation detects this and switches
to an equivalent reduced just-identified system in (theta, alpha) with
lambda = U alpha constrained to the nullspace of the stationarity block.
That reduction reproduces the small-error sandwich exactly at lambda = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._linalg import (SingularMatrixError, assert_psd, cond_estimate,
                      inv_checked, null_space, solve_checked, symmetrize)
from .models import Dataset, ErrorConstraint, MomentModel, projection_matrix
from .special import chi2_sf
from .transport import dq_batch, rescale_for_weights

__all__ = [
    "LargeErrorComponents",
    "LargeErrorResult",
    "variance_small_error",
    "variance_large_error",
    "error_absence_test",
    "error_sd_report",
    "reference_variances_mean_model",
    "gtilde_blocks",
]


# ---------------------------------------------------------------------------
# Small-error sandwich
# ---------------------------------------------------------------------------

def variance_small_error(model: MomentModel, data: Dataset, theta_hat,
                         constraint: Optional[ErrorConstraint] = None,
                         at_points: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-estimate covariance (asymptotic variance / n) in the small-error regime.

    Sandwich with bread (G' M^{-1} G)^{-1} and meat G' M^{-1} S M^{-1} G,
    where M = E-hat[H P H'] and S = E-hat[g g'], everything evaluated at the
    observed points (pass ``at_points`` to evaluate at transported points
    instead).
    """
    model, data, constraint, _ = rescale_for_weights(model, data, constraint)
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    pts = data.values if at_points is None else np.atleast_2d(np.asarray(at_points))
    n = pts.shape[0]

    Hi = model.eval_H(pts, theta_hat)
    gi = model.eval_g(pts, theta_hat)
    Gbar = model.eval_G(pts, theta_hat).mean(axis=0)
    if constraint is not None and constraint.m > 0:
        P = projection_matrix(constraint, model.d_x)
        M = np.einsum("nky,yx,nlx->kl", Hi, P, Hi) / n
    else:
        M = np.einsum("nkx,nlx->kl", Hi, Hi) / n
    S = gi.T @ gi / n

    MinvG = solve_checked(symmetrize(M), Gbar, "E-hat[H P H']")
    bread = inv_checked(Gbar.T @ MinvG, "sandwich bread G'M^{-1}G")
    meat = MinvG.T @ S @ MinvG
    return symmetrize(bread @ meat @ bread) / n


# ---------------------------------------------------------------------------
# Large-error covariance
# ---------------------------------------------------------------------------

@dataclass
class LargeErrorComponents:
    """Pieces of the augmented just-identified system at (theta_hat, lambda_hat).

    ``Gtilde`` stacks the derivative blocks [[G_tt, G_tl], [G_lt, G_ll]] of the
    augmented moment in (theta, lambda); ``Omega`` is the raw second moment of
    the stacked per-observation moments; ``W = Gtilde' Omega^+ Gtilde``.  The
    quadratic form of the error-absence statistic and its degrees of freedom
    are precomputed here so the test is a pure function of (components,
    lambda_hat, n).
    """

    d_theta: int
    d_g: int
    Gtilde: np.ndarray
    Omega: np.ndarray
    W: np.ndarray
    test_matrix: np.ndarray
    test_df: int
    route: str                      # "reduced" or "full"
    gtilde_obs: np.ndarray = field(repr=False, default=None)

    @property
    def G_thetatheta(self):
        return self.Gtilde[:self.d_theta, :self.d_theta]

    @property
    def G_thetalambda(self):
        return self.Gtilde[:self.d_theta, self.d_theta:]

    @property
    def G_lambdatheta(self):
        return self.Gtilde[self.d_theta:, :self.d_theta]

    @property
    def G_lambdalambda(self):
        return self.Gtilde[self.d_theta:, self.d_theta:]

    def W_block(self, row: str, col: str) -> np.ndarray:
        sl = {"theta": slice(0, self.d_theta), "lambda": slice(self.d_theta, None)}
        return self.W[sl[row], sl[col]]


@dataclass
class LargeErrorResult:
    components: LargeErrorComponents
    cov_theta: np.ndarray
    cov_full: np.ndarray


def gtilde_blocks(model: MomentModel, X: np.ndarray, theta, lam, proj=None):
    """Sample versions of the augmented-system derivative blocks at (theta, lam).

    Returns ``(Gtilde, gtilde_obs, Z, gi)`` where ``Gtilde`` is the stacked
    (d_theta + d_g) square derivative matrix, ``gtilde_obs`` the (n, d_theta +
    d_g) per-observation stacked moments, ``Z`` the transported points, and
    ``gi`` the plain moments at ``Z``.  Under an error constraint, ``proj``
    carries the projector that enters the transport map.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    n = X.shape[0]

    dqt, dql, Z = dq_batch(model, X, theta, lam, proj=proj)
    Gi = model.eval_G(Z, theta)                       # (n, d_g, d_theta)
    Hi = model.eval_H(Z, theta)                       # (n, d_g, d_x)
    gi = model.eval_g(Z, theta)                       # (n, d_g)
    hzt = model.eval_hess_ztheta(Z, theta, lam)       # (n, d_x, d_theta)
    htt = model.eval_hess_thetatheta(Z, theta, lam)   # (n, d_theta, d_theta)

    hzt_T = hzt.transpose(0, 2, 1)                    # (n, d_theta, d_x)
    G_tt = (htt + hzt_T @ dqt).mean(axis=0)
    G_tl = (Gi.transpose(0, 2, 1) + hzt_T @ dql).mean(axis=0)
    G_lt = (Gi + Hi @ dqt).mean(axis=0)
    G_ll = (Hi @ dql).mean(axis=0)

    Gtilde = np.block([[G_tt, G_tl], [G_lt, G_ll]])
    gtilde_obs = np.hstack([np.einsum("nkt,k->nt", Gi, lam), gi])
    return Gtilde, gtilde_obs, Z, gi


def gtilde_residual_and_jacobian(model: MomentModel, X: np.ndarray, theta, lam):
    """Stacked sample moment E-hat[gtilde] and its derivative in (theta, lambda).

    The zero set of the residual characterizes the estimator as a
    just-identified system in the augmented parameter; used by the direct
    Newton solver.
    """
    Gtilde, gtilde_obs, _, _ = gtilde_blocks(model, X, theta, lam)
    return gtilde_obs.mean(axis=0), Gtilde


def variance_large_error(model: MomentModel, data: Dataset, theta_hat,
                         lambda_hat, opts=None,
                         constraint: Optional[ErrorConstraint] = None,
                         ) -> LargeErrorResult:
    """Covariance of (theta_hat, lambda_hat) from the augmented system.

    When the stationarity block of Omega is informative the plain
    (Gtilde' Omega^{-1} Gtilde)^{-1} / n formula applies.  At and near the
    no-error null that block is degenerate, so the covariance is computed from
    the reduced system instead: parameters (theta, alpha) with lambda =
    U alpha, U an orthonormal basis of the nullspace of E-hat[G(q)]', and the
    d_g plain moments at the transported points.
    """
    model, data, constraint, _ = rescale_for_weights(model, data, constraint)
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    lambda_hat = np.atleast_1d(np.asarray(lambda_hat, dtype=float))
    d_theta, d_g = model.d_theta, model.d_g
    X = data.values
    n = data.n
    proj = None
    if constraint is not None and constraint.m > 0:
        proj = projection_matrix(constraint, model.d_x)

    Gtilde, gtilde_obs, Z, gi = gtilde_blocks(model, X, theta_hat, lambda_hat,
                                              proj=proj)
    Omega = symmetrize(gtilde_obs.T @ gtilde_obs / n)
    W = symmetrize(np.linalg.pinv(Omega, rcond=1e-12))
    W = symmetrize(Gtilde.T @ W @ Gtilde)

    trace_top = float(np.trace(Omega[:d_theta, :d_theta]))
    trace_bottom = float(np.trace(Omega[d_theta:, d_theta:]))
    degenerate = (trace_top <= 1e-12 * (1.0 + trace_bottom)
                  or cond_estimate(Omega) > 1e10)

    G_lt = Gtilde[d_theta:, :d_theta]
    G_ll = Gtilde[d_theta:, d_theta:]

    if degenerate:
        # reduced just-identified system in (theta, alpha)
        Gq_bar = model.eval_G(Z, theta_hat).mean(axis=0)
        U = null_space(Gq_bar.T)                      # (d_g, d_g - d_theta)
        J = np.hstack([G_lt, G_ll @ U])
        Sigma = symmetrize(gi.T @ gi / n)
        Jinv = inv_checked(J, "reduced-system derivative")
        avar = symmetrize(Jinv @ Sigma @ Jinv.T)      # (theta, alpha) scale
        cov_theta = avar[:d_theta, :d_theta] / n
        T = np.zeros((d_theta + d_g, avar.shape[0]))
        T[:d_theta, :d_theta] = np.eye(d_theta)
        T[d_theta:, d_theta:] = U
        cov_full = symmetrize(T @ avar @ T.T) / n
        avar_alpha = avar[d_theta:, d_theta:]
        if avar_alpha.size:
            test_matrix = symmetrize(U @ inv_checked(avar_alpha, "Avar(alpha)") @ U.T)
        else:
            test_matrix = np.zeros((d_g, d_g))        # just identified: nothing to test
        test_df = d_g
        route = "reduced"
    else:
        Winv = inv_checked(W, "W = Gtilde' Omega^{-1} Gtilde")
        cov_full = symmetrize(Winv) / n
        W_tt = W[:d_theta, :d_theta]
        W_tl = W[:d_theta, d_theta:]
        W_lt = W[d_theta:, :d_theta]
        W_ll = W[d_theta:, d_theta:]
        schur_theta = W_tt - W_tl @ solve_checked(W_ll, W_lt, "W_ll")
        cov_theta = symmetrize(inv_checked(schur_theta, "theta Schur complement")) / n
        test_matrix = symmetrize(W_ll - W_lt @ solve_checked(W_tt, W_tl, "W_tt"))
        test_df = d_g
        route = "full"

    components = LargeErrorComponents(
        d_theta=d_theta, d_g=d_g, Gtilde=Gtilde, Omega=Omega, W=W,
        test_matrix=test_matrix, test_df=test_df, route=route,
        gtilde_obs=gtilde_obs)
    return LargeErrorResult(components=components, cov_theta=cov_theta,
                            cov_full=cov_full)


def error_absence_test(components: LargeErrorComponents, lambda_hat,
                       n: int) -> dict:
    """Wald-type test of the no-error hypothesis lambda = 0.

    The statistic is the quadratic form of lambda_hat in the inverse of its
    own asymptotic covariance, n * lambda' S lambda, referred to a chi-square
    with d_g degrees of freedom.  Note the stationarity condition ties lambda
    to a (d_g - d_theta)-dimensional subspace, so the d_g reference is
    conservative in large samples; at the moderate sample sizes this test
    targets, the heavy upper tail of the finite-sample statistic offsets the
    extra degrees of freedom (simulated size tracks the nominal level; see
    the acceptance suite).
    """
    lam = np.atleast_1d(np.asarray(lambda_hat, dtype=float))
    S = components.test_matrix
    try:
        assert_psd(S, "error-absence test weight")
    except SingularMatrixError:
        eigs = np.linalg.eigvalsh(symmetrize(S))
        raise SingularMatrixError(
            f"test weight matrix not PSD; eigenvalues {eigs}", cond_estimate(S))
    stat = float(n * lam @ S @ lam)
    stat = max(stat, 0.0)
    df = components.test_df
    return {"stat": stat, "df": df, "pvalue": chi2_sf(stat, df)}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def error_sd_report(z_hat: np.ndarray, data: Dataset) -> dict:
    """Per-column spread of the applied corrections next to the observed spread.

    For each column: standard deviation of ``z - x`` (the correction), its
    mean, and the standard deviation of the observed ``x``.  Population
    convention (divide by n) throughout.
    """
    z_hat = np.atleast_2d(np.asarray(z_hat, dtype=float))
    if z_hat.shape != data.values.shape:
        raise ValueError(f"z_hat has shape {z_hat.shape}, expected {data.values.shape}")
    corr = z_hat - data.values
    report = {}
    for j, name in enumerate(data.columns):
        report[name] = {
            "sd_correction": float(np.std(corr[:, j])),
            "mean_correction": float(np.mean(corr[:, j])),
            "sd_observed": float(np.std(data.values[:, j])),
        }
    return report


def reference_variances_mean_model(omegas) -> dict:
    """Closed-form asymptotic variances for the shared-location model.

    With d coordinate moments ``z_l - theta`` and coordinate variances
    ``omega_l``, transport weighting gives ``sum(omega) / d^2`` while optimal
    inverse-variance weighting gives the harmonic form ``1 / sum(1/omega)``.
    The arithmetic-harmonic mean inequality makes the first never smaller.
    """
    omegas = np.asarray(omegas, dtype=float).ravel()
    if omegas.size == 0 or np.any(omegas <= 0) or not np.all(np.isfinite(omegas)):
        raise ValueError("variances must be positive and finite")
    d = omegas.size
    return {
        "v_otgmm": float(np.sum(omegas) / d ** 2),
        "v_gmm": float(1.0 / np.sum(1.0 / omegas)),
    }

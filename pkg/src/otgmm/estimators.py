"""Outer estimation layer: linearized, nested, joint-FOC, and two-step GMM.

All outer minimizations are derivative-free (multistart Nelder-Mead): the
nested transport objective is smooth but its exact parameter gradient needs
envelope bookkeeping that buys little at the dimensions this package targets.
Each estimator returns an :class:`EstimateResult` with a per-estimate
covariance (asymptotic variance / n) and, for the transport-based methods,
the multiplier, transported points, and objective value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from ._linalg import SingularMatrixError, inv_checked, solve_checked, symmetrize
from .inference import (error_absence_test, gtilde_residual_and_jacobian,
                        variance_large_error, variance_small_error)
from .models import (Dataset, ErrorConstraint, MomentModel, ols_theta_init,
                     projection_matrix)
from .transport import (SolverOptions, convergence_diagnostic, inner_solve,
                        rescale_for_weights)

__all__ = [
    "EstimateResult",
    "EstimationError",
    "estimate_linearized",
    "estimate_otgmm",
    "solve_joint_foc",
    "estimate_efficient_gmm",
    "projection_matrix",
]

PENALTY = 1e50


class EstimationError(RuntimeError):
    """Estimation failed (optimizer or inner solver); details in ``diagnostics``."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


@dataclass
class EstimateResult:
    """Point estimate with covariance and solver diagnostics."""

    theta_hat: np.ndarray
    lambda_hat: Optional[np.ndarray]
    qhat: float
    cov: Optional[np.ndarray]
    se: Optional[np.ndarray]
    method: str
    z_hat: Optional[np.ndarray] = None
    diagnostics: dict = None
    test: Optional[dict] = None

    def __post_init__(self):
        if self.diagnostics is None:
            self.diagnostics = {}

    def to_dict(self) -> dict:
        out = {
            "theta_hat": np.asarray(self.theta_hat).tolist(),
            "lambda_hat": None if self.lambda_hat is None else np.asarray(self.lambda_hat).tolist(),
            "qhat": self.qhat,
            "cov": None if self.cov is None else np.asarray(self.cov).tolist(),
            "se": None if self.se is None else np.asarray(self.se).tolist(),
            "method": self.method,
            "test": self.test,
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if isinstance(v, (int, float, str, bool, list, dict))},
        }
        return out


# ---------------------------------------------------------------------------
# Multistart Nelder-Mead
# ---------------------------------------------------------------------------

def _multistart_nm(objective, starts, xatol=1e-10, fatol=1e-14,
                   coarse_xatol=1e-5, max_iter=400, n_refine=2,
                   polish_objective=None):
    """Multistart Nelder-Mead: probe every start, refine the promising ones.

    All distinct starts are ranked by objective value; a coarse Nelder-Mead
    runs from the best ``n_refine`` of them and a tight polish from the
    overall winner (using ``polish_objective`` when the coarse phase ran on a
    cheaper surrogate).  Ties break by probe index, keeping the result
    deterministic.  Returns ``(x, fun, diagnostics)``.
    """
    dedup = []
    for s in starts:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if not any(np.allclose(s, t, rtol=0, atol=1e-12) for t in dedup):
            dedup.append(s)

    def simplex_around(x0, spread):
        dim = x0.size
        rows = [x0]
        for i in range(dim):
            vertex = x0.copy()
            vertex[i] += spread * (1.0 + abs(x0[i]))
            rows.append(vertex)
        return np.array(rows)

    probes = sorted(((float(objective(s)), idx) for idx, s in enumerate(dedup)),
                    key=lambda p: (p[0], p[1]))
    evals = len(dedup)
    best = None
    for val, idx in probes[:max(1, n_refine)]:
        if val >= PENALTY and best is not None:
            break
        res = minimize(objective, dedup[idx], method="Nelder-Mead",
                       options={"xatol": coarse_xatol, "fatol": 1e-10,
                                "maxiter": max_iter, "maxfev": max_iter,
                                "initial_simplex": simplex_around(dedup[idx], 0.05)})
        evals += res.nfev
        if best is None or res.fun < best[1] - 1e-15:
            best = (res.x, res.fun, idx)
    fine = polish_objective if polish_objective is not None else objective
    res = minimize(fine, best[0], method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": fatol,
                            "maxiter": 4 * max_iter, "maxfev": 4 * max_iter,
                            "initial_simplex": simplex_around(best[0], 1e-4)})
    evals += res.nfev
    if polish_objective is not None:
        best = (best[0], float(fine(best[0])), best[2])
    x, fun = (res.x, res.fun) if res.fun <= best[1] else (best[0], best[1])
    if fun >= PENALTY:
        raise EstimationError("objective failed at every probe point",
                              {"starts": [s.tolist() for s in dedup]})
    return np.atleast_1d(x), float(fun), {"n_starts": len(dedup), "n_evals": evals}


def _default_starts(theta_init, extra=None, n_perturb=3, seed=8675309):
    center = np.atleast_1d(np.asarray(theta_init, dtype=float))
    starts = [center]
    if extra is not None:
        starts.append(np.atleast_1d(np.asarray(extra, dtype=float)))
    rng = np.random.default_rng(seed)
    anchor = starts[-1]
    scale = 0.5 * (1.0 + np.abs(anchor))
    for _ in range(n_perturb):
        starts.append(anchor + scale * rng.standard_normal(center.shape))
    return starts


# ---------------------------------------------------------------------------
# Linearized estimator
# ---------------------------------------------------------------------------

def estimate_linearized(model: MomentModel, data: Dataset, theta_init=None,
                        constraint: Optional[ErrorConstraint] = None,
                        compute_cov: bool = True) -> EstimateResult:
    """Small-error closed-form weighting: minimize g-bar' (E-hat[H P H'])^{-1} g-bar.

    The weighting matrix is re-evaluated at every trial theta (continuously
    updated).  ``qhat`` is half the minimized quadratic form, the transport
    cost this objective approximates.
    """
    work_model, work_data, work_constraint, _ = rescale_for_weights(
        model, data, constraint)
    if theta_init is None:
        theta_init = ols_theta_init(model, data)
    X = work_data.values
    n = work_data.n
    P = None
    if work_constraint is not None and work_constraint.m > 0:
        P = projection_matrix(work_constraint, work_model.d_x)

    def objective(theta):
        gi = work_model.eval_g(X, theta)
        Hi = work_model.eval_H(X, theta)
        if not (np.all(np.isfinite(gi)) and np.all(np.isfinite(Hi))):
            return PENALTY
        gbar = gi.mean(axis=0)
        if P is None:
            M = np.einsum("nkx,nlx->kl", Hi, Hi) / n
        else:
            M = np.einsum("nky,yx,nlx->kl", Hi, P, Hi) / n
        try:
            return float(gbar @ solve_checked(symmetrize(M), gbar, "E-hat[H P H']"))
        except SingularMatrixError:
            return PENALTY

    starts = _default_starts(theta_init)
    theta_hat, fun, diag = _multistart_nm(objective, starts)
    cov = se = None
    if compute_cov:
        cov = variance_small_error(model, data, theta_hat, constraint)
        se = np.sqrt(np.diag(cov))
    return EstimateResult(theta_hat=theta_hat, lambda_hat=None, qhat=0.5 * fun,
                          cov=cov, se=se, method="linearized_otgmm",
                          diagnostics=diag)


# ---------------------------------------------------------------------------
# Nested transport estimator
# ---------------------------------------------------------------------------

def estimate_otgmm(model: MomentModel, data: Dataset, theta_init=None,
                   opts: SolverOptions = SolverOptions(),
                   constraint: Optional[ErrorConstraint] = None,
                   compute_cov: bool = True,
                   compute_test: bool = False) -> EstimateResult:
    """Nested estimator: minimize the transport objective Q-hat(theta).

    Every trial theta runs the inner fixed-point solver from scratch;
    non-converged inner problems act as an infinite objective so the outer
    search stays inside the feasible region.  Starts: ``theta_init``, the
    linearized estimate, and three perturbations around it.
    """
    if theta_init is None:
        theta_init = ols_theta_init(model, data)

    coarse_opts = SolverOptions(
        eps_z=max(opts.eps_z, 1e-8), eps_lambda=max(opts.eps_lambda, 1e-8),
        max_iter=min(opts.max_iter, 300), damping=opts.damping,
        ridge=opts.ridge)
    caches = {id(opts): {}, id(coarse_opts): {}}

    def make_objective(solver_opts):
        cache = caches[id(solver_opts)]

        def objective(theta):
            key = tuple(np.round(np.atleast_1d(theta), 14))
            if key in cache:
                return cache[key]
            sol = inner_solve(model, data, theta, solver_opts, constraint)
            val = sol.qhat if sol.converged else PENALTY
            cache[key] = val
            return val
        return objective

    lin_theta = None
    try:
        lin = estimate_linearized(model, data, theta_init, constraint,
                                  compute_cov=False)
        lin_theta = lin.theta_hat
    except EstimationError:
        pass
    starts = _default_starts(theta_init, extra=lin_theta)
    theta_hat, fun, diag = _multistart_nm(
        make_objective(coarse_opts), starts,
        polish_objective=make_objective(opts))

    sol = inner_solve(model, data, theta_hat, opts, constraint)
    if not sol.converged:
        raise EstimationError(f"inner solver failed at the optimum: {sol.status}",
                              {"status": sol.status, "theta": theta_hat.tolist()})
    diag["inner"] = sol.to_dict() | {"z": None}
    diag["contraction"] = convergence_diagnostic(model, data, sol, theta_hat).to_dict()

    cov = se = test = None
    if compute_cov:
        cov = variance_small_error(model, data, theta_hat, constraint)
        se = np.sqrt(np.diag(cov))
    if compute_test:
        large = variance_large_error(model, data, theta_hat, sol.lam,
                                     constraint=constraint)
        test = error_absence_test(large.components, sol.lam, data.n)
    return EstimateResult(theta_hat=theta_hat, lambda_hat=sol.lam, qhat=sol.qhat,
                          cov=cov, se=se, method="otgmm", z_hat=sol.z,
                          diagnostics=diag, test=test)


# ---------------------------------------------------------------------------
# Joint first-order-condition solver
# ---------------------------------------------------------------------------

def solve_joint_foc(model: MomentModel, data: Dataset, theta_init=None,
                    lambda_init=None, max_iter: int = 100, tol: float = 1e-11,
                    compute_cov: bool = True) -> EstimateResult:
    """Damped Newton on the stacked conditions E-hat[gtilde(x, theta, lambda)] = 0.

    The stacked moment routes through the implicit transport map, and the
    Jacobian is assembled from its implicit-function derivatives.  On Newton
    breakdown the nested estimator is run instead and the fallback recorded.
    """
    if theta_init is None:
        theta_init = ols_theta_init(model, data)
    theta = np.atleast_1d(np.asarray(theta_init, dtype=float)).copy()
    lam = (np.zeros(model.d_g) if lambda_init is None
           else np.atleast_1d(np.asarray(lambda_init, dtype=float)).copy())
    X = data.values
    d_theta = model.d_theta

    def fallback(reason):
        base = estimate_otgmm(model, data, theta_init, compute_cov=compute_cov)
        base.method = "otgmm_joint_foc"
        base.diagnostics["newton_fallback"] = reason
        return base

    try:
        F, J = gtilde_residual_and_jacobian(model, X, theta, lam)
    except Exception as exc:            # q_map may fail far from a solution
        return fallback(f"initial residual failed: {exc}")
    scale = 1.0 + float(np.linalg.norm(F))
    converged = False
    for it in range(1, max_iter + 1):
        if np.linalg.norm(F) <= tol * scale:
            converged = True
            break
        try:
            step = solve_checked(J, -F, "stacked-system Jacobian")
        except SingularMatrixError as exc:
            return fallback(str(exc))
        t = 1.0
        base_norm = np.linalg.norm(F)
        while t >= 1.0 / 64.0:
            theta_try = theta + t * step[:d_theta]
            lam_try = lam + t * step[d_theta:]
            try:
                F_try, J_try = gtilde_residual_and_jacobian(model, X, theta_try, lam_try)
            except Exception:
                t *= 0.5
                continue
            if np.linalg.norm(F_try) < (1.0 - 1e-4 * t) * base_norm:
                theta, lam, F, J = theta_try, lam_try, F_try, J_try
                break
            t *= 0.5
        else:
            return fallback("Newton line search stalled")
    if not converged and np.linalg.norm(F) > tol * scale:
        return fallback("Newton did not converge within the iteration budget")

    sol = inner_solve(model, data, theta)
    qhat = sol.qhat if sol.converged else np.nan
    cov = se = None
    if compute_cov:
        large = variance_large_error(model, data, theta, lam)
        cov = large.cov_theta
        se = np.sqrt(np.diag(cov))
    return EstimateResult(theta_hat=theta, lambda_hat=lam, qhat=qhat, cov=cov,
                          se=se, method="otgmm_joint_foc",
                          z_hat=sol.z if sol.converged else None,
                          diagnostics={"newton_iterations": it,
                                       "residual_norm": float(np.linalg.norm(F))})


# ---------------------------------------------------------------------------
# Efficient GMM baseline
# ---------------------------------------------------------------------------

def estimate_efficient_gmm(model: MomentModel, data: Dataset, theta_init=None,
                           compute_cov: bool = True) -> EstimateResult:
    """Two-step GMM on the observed data, ignoring errors in the variables.

    First step uses identity weighting, the second the inverse of the raw
    moment second-moment matrix from the first-step estimate.
    """
    if theta_init is None:
        theta_init = ols_theta_init(model, data)
    X = data.values
    n = data.n

    def make_objective(W):
        def objective(theta):
            gi = model.eval_g(X, theta)
            if not np.all(np.isfinite(gi)):
                return PENALTY
            gbar = gi.mean(axis=0)
            return float(gbar @ W @ gbar)
        return objective

    theta1, _, diag1 = _multistart_nm(make_objective(np.eye(model.d_g)),
                                      _default_starts(theta_init))
    S = model.eval_g(X, theta1)
    S = S.T @ S / n
    W2 = inv_checked(symmetrize(S), "moment variance E-hat[gg']")
    theta2, fun, diag2 = _multistart_nm(make_objective(W2),
                                        _default_starts(theta1, n_perturb=2))

    cov = se = None
    if compute_cov:
        Gbar = model.eval_G(X, theta2).mean(axis=0)
        cov = symmetrize(inv_checked(Gbar.T @ W2 @ Gbar, "G'WG")) / n
        se = np.sqrt(np.diag(cov))
    return EstimateResult(theta_hat=theta2, lambda_hat=None, qhat=float(fun),
                          cov=cov, se=se, method="efficient_gmm",
                          diagnostics={"step1_theta": theta1.tolist(),
                                       "step1": diag1, "step2": diag2})

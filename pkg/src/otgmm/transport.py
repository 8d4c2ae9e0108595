"""Inner transport problem: move observations the least to satisfy the moments.

For a fixed parameter value the solver finds points ``z`` minimizing
``0.5 * mean ||z - x||^2`` subject to ``mean g(z, theta) = 0``.  The workhorse
is a damped fixed-point iteration on the first-order conditions; a quadratic
penalty continuation solver acts as an independent oracle for small samples.
The implicit map ``q(x, theta, lam)`` inverts the stationarity condition
``z - H(z, theta)' lam = x`` for a single point and supplies the derivatives
used by the large-error covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from ._linalg import SingularMatrixError, cond_estimate, solve_checked
from .models import Dataset, ErrorConstraint, MomentModel, projection_matrix

__all__ = [
    "SolverOptions",
    "InnerSolution",
    "NoRootError",
    "inner_solve",
    "oracle_inner_solve",
    "q_map",
    "q_map_batch",
    "dq_dtheta",
    "dq_dlambda",
    "convergence_diagnostic",
    "rescale_for_weights",
]

DIVERGENCE_FACTOR = 1e8


class NoRootError(RuntimeError):
    """Newton iteration for the transport map found no root within budget."""


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and safeguards for the fixed-point inner solver.

    ``eps_z`` bounds the largest per-observation step between iterations,
    ``eps_lambda`` the multiplier step.  ``damping`` scales the z-update and is
    halved automatically (floor 0.125) when the transport objective
    oscillates.  ``ridge`` adds ``ridge * trace/d_g`` to the moment-derivative
    Gram matrix before inversion; the default 0 surfaces singularity instead
    of repairing it.
    """

    eps_z: float = 1e-10
    eps_lambda: float = 1e-10
    max_iter: int = 500
    damping: float = 1.0
    ridge: float = 0.0

    def __post_init__(self):
        if self.eps_z <= 0 or self.eps_lambda <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass
class InnerSolution:
    """Transported points and multiplier for one parameter value."""

    z: np.ndarray
    lam: np.ndarray
    qhat: float
    iterations: int
    status: str                      # converged | max_iter_exceeded | diverged | singular_weighting
    foc_z_residual: float = np.nan   # max_j ||(z_j-x_j) - (P)H'(z_j) lam||
    foc_g_residual: float = np.nan   # ||mean g(z, theta)||
    damping_used: float = 1.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        return {
            "z": self.z.tolist(),
            "lambda": self.lam.tolist(),
            "qhat": self.qhat,
            "iterations": self.iterations,
            "status": self.status,
            "foc_z_residual": self.foc_z_residual,
            "foc_g_residual": self.foc_g_residual,
            "damping_used": self.damping_used,
        }


# ---------------------------------------------------------------------------
# Weighted transport norm
# ---------------------------------------------------------------------------

def rescale_for_weights(model: MomentModel, data: Dataset,
                        constraint: Optional[ErrorConstraint]):
    """Reduce a weighted transport norm to the plain Euclidean case.

    With per-coordinate weights ``w`` the cost of a correction is
    ``sum (z_l - x_l)^2 / w_l``; substituting ``z -> z / sqrt(w)`` restores the
    unweighted problem.  Returns ``(model', data', constraint', undo)`` where
    ``undo`` maps transported points back to original coordinates.  The
    multiplier ``lam`` is invariant under this change of variables.
    """
    if constraint is None or constraint.weights is None:
        return model, data, constraint, lambda z: z

    s = np.sqrt(constraint.weights)
    if s.shape != (model.d_x,):
        raise ValueError(f"weights must have length {model.d_x}")

    def wrap_g(Z, theta):
        return model.g(np.atleast_2d(Z) * s, theta)

    def wrap_H(Z, theta):
        return model.H(np.atleast_2d(Z) * s, theta) * s[None, None, :]

    def wrap_G(Z, theta):
        return model.G(np.atleast_2d(Z) * s, theta)

    def wrap_hzz(Z, theta, lam):
        h = model.hess_zz(np.atleast_2d(Z) * s, theta, lam)
        return h * s[None, :, None] * s[None, None, :]

    def wrap_hzt(Z, theta, lam):
        return model.hess_ztheta(np.atleast_2d(Z) * s, theta, lam) * s[None, :, None]

    def wrap_htt(Z, theta, lam):
        return model.hess_thetatheta(np.atleast_2d(Z) * s, theta, lam)

    scaled_model = replace(
        model, name=model.name + "+weights", g=wrap_g, H=wrap_H, G=wrap_G,
        hess_zz=wrap_hzz, hess_ztheta=wrap_hzt, hess_thetatheta=wrap_htt)
    scaled_data = Dataset(data.values / s, data.columns)
    scaled_constraint = None
    if constraint.m > 0:
        scaled_constraint = ErrorConstraint(constraint.C * s[None, :])
    return scaled_model, scaled_data, scaled_constraint, lambda z: z * s


# ---------------------------------------------------------------------------
# Fixed-point inner solver
# ---------------------------------------------------------------------------

def inner_solve(model: MomentModel, data: Dataset, theta: np.ndarray,
                opts: SolverOptions = SolverOptions(),
                constraint: Optional[ErrorConstraint] = None) -> InnerSolution:
    """Solve the inner transport problem for a fixed ``theta``.

    Iterates the multiplier/point updates

        lam <- (E-hat[H P H'])^{-1} (-E-hat[g] + E-hat[H (z - x)])
        z_j <- x_j + P H'(z_j) lam

    starting from ``z = x``, with the configured damping on the point update.
    Under a constraint, ``P`` projects corrections onto the allowed-error
    subspace; otherwise ``P = I``.
    """
    model, data, constraint, undo = rescale_for_weights(model, data, constraint)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = data.values
    n = data.n

    P = None
    if constraint is not None and constraint.m > 0:
        P = projection_matrix(constraint, model.d_x)

    z = x.copy()
    lam = np.zeros(model.d_g)
    damping = opts.damping
    scale = 1.0 + float(np.max(np.abs(x)))
    status = "max_iter_exceeded"
    iterations = opts.max_iter
    prev_raw = None

    for t in range(1, opts.max_iter + 1):
        Hi = model.eval_H(z, theta)                      # (n, d_g, d_x)
        gi = model.eval_g(z, theta)
        if not (np.all(np.isfinite(Hi)) and np.all(np.isfinite(gi))):
            status, iterations = "diverged", t
            break
        HiP = Hi if P is None else Hi @ P
        M = np.einsum("nky,nly->kl", HiP, Hi) / n        # E-hat[H P H']
        if opts.ridge > 0:
            M = M + (opts.ridge * np.trace(M) / model.d_g) * np.eye(model.d_g)
        rhs = -gi.mean(axis=0) + np.einsum("nkx,nx->k", Hi, z - x) / n
        try:
            lam_new = solve_checked(M, rhs, "E-hat[H P H']")
        except SingularMatrixError:
            status, iterations = "singular_weighting", t
            break
        step = np.einsum("nkx,k->nx", HiP, lam_new)      # P H'(z_j) lam
        raw = x + step - z                               # undamped displacement

        # adaptive relaxation: successive raw displacements contract with
        # factor rho = 1 - damping * (1 - mu), mu the dominant eigenvalue of
        # the iteration map, so 1/(1 - mu) = damping / (1 - rho) is the step
        # factor that flattens the slow mode (negative mu: oscillation)
        if prev_raw is not None:
            denom = float(np.dot(prev_raw.ravel(), prev_raw.ravel()))
            if denom > 1e-300:
                rho = float(np.dot(raw.ravel(), prev_raw.ravel())) / denom
                if rho < 1.0 - 1e-12:
                    damping = float(np.clip(damping / (1.0 - rho), 0.05,
                                            opts.damping))
        prev_raw = raw
        z_new = z + damping * raw

        if not np.all(np.isfinite(z_new)) or np.max(np.abs(z_new - x)) > DIVERGENCE_FACTOR * scale:
            status, iterations = "diverged", t
            break

        dz = float(np.max(np.sqrt(np.sum((z_new - z) ** 2, axis=1))))
        dlam = float(np.linalg.norm(lam_new - lam))
        z, lam = z_new, lam_new
        if dz <= opts.eps_z and dlam <= opts.eps_lambda:
            if _foc_residuals(model, x, z, lam, theta, P)[1] <= 10.0 * opts.eps_lambda:
                status, iterations = "converged", t
                break

    foc_z, foc_g = _foc_residuals(model, x, z, lam, theta, P)
    qhat = _qhat(model, x, z, lam, theta, P)
    return InnerSolution(z=undo(z), lam=lam, qhat=qhat, iterations=iterations,
                         status=status, foc_z_residual=foc_z, foc_g_residual=foc_g,
                         damping_used=damping)


def _foc_residuals(model, x, z, lam, theta, P):
    Hi = model.eval_H(z, theta)
    HiP = Hi if P is None else Hi @ P
    step = np.einsum("nkx,k->nx", HiP, lam)
    foc_z = float(np.max(np.sqrt(np.sum((z - x - step) ** 2, axis=1))))
    foc_g = float(np.linalg.norm(model.eval_g(z, theta).mean(axis=0)))
    return foc_z, foc_g


def _qhat(model, x, z, lam, theta, P):
    Hi = model.eval_H(z, theta)
    HiP = Hi if P is None else Hi @ P
    M = np.einsum("nky,nly->kl", HiP, Hi) / x.shape[0]
    return 0.5 * float(lam @ M @ lam)


# ---------------------------------------------------------------------------
# Penalty-continuation oracle
# ---------------------------------------------------------------------------

def oracle_inner_solve(model: MomentModel, data: Dataset, theta: np.ndarray,
                       mu_ladder: tuple = (1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8),
                       max_n: int = 50) -> InnerSolution:
    """Direct small-sample minimizer of the transport problem.

    Quadratic penalty continuation: each stage minimizes
    ``0.5 * mean ||z - x||^2 + 0.5 * mu * ||mean g(z, theta)||^2`` over all
    ``n * d_x`` coordinates with L-BFGS, warm-started from the previous stage.
    Kept deliberately independent of the fixed-point solver so the two can
    cross-check each other.  The multiplier is recovered afterwards by least
    squares on the stationarity residuals.
    """
    if data.n > max_n:
        raise ValueError(f"oracle solver is guarded to n <= {max_n} (got {data.n})")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = data.values
    n, d_x = x.shape

    def violation(zf):
        return float(np.linalg.norm(
            model.eval_g(zf.reshape(n, d_x), theta).mean(axis=0)))

    def stage_obj(zf, mu):
        Z = zf.reshape(n, d_x)
        gbar = model.eval_g(Z, theta).mean(axis=0)
        val = 0.5 * np.mean(np.sum((Z - x) ** 2, axis=1)) + 0.5 * mu * float(gbar @ gbar)
        Hi = model.eval_H(Z, theta)
        grad = (Z - x) / n + (mu / n) * np.einsum("nkx,k->nx", Hi, gbar)
        return val, grad.ravel()

    def polish(zf, mu, max_steps=12):
        # full Newton on the penalty objective; the L-BFGS stages leave
        # ill-scaled residuals when moment sensitivities span many orders
        Z = zf.reshape(n, d_x)
        dim = n * d_x
        for _ in range(max_steps):
            gbar = model.eval_g(Z, theta).mean(axis=0)
            Hi = model.eval_H(Z, theta)
            grad = ((Z - x) / n + (mu / n) * np.einsum("nkx,k->nx", Hi, gbar)).ravel()
            if np.linalg.norm(grad) < 1e-14 * (1.0 + mu):
                break
            hess = np.zeros((dim, dim))
            Hflat = Hi.transpose(0, 2, 1).reshape(dim, model.d_g)
            hess += (mu / n ** 2) * (Hflat @ Hflat.T)
            curv = model.eval_hess_zz(Z, theta, gbar)
            for j in range(n):
                sl = slice(j * d_x, (j + 1) * d_x)
                hess[sl, sl] += np.eye(d_x) / n + (mu / n) * curv[j]
            try:
                step = np.linalg.solve(hess + 1e-14 * np.eye(dim), -grad)
            except np.linalg.LinAlgError:
                break
            f0 = stage_obj(Z.ravel(), mu)[0]
            t = 1.0
            while t > 1e-4:
                cand = Z.ravel() + t * step
                if stage_obj(cand, mu)[0] < f0:
                    Z = cand.reshape(n, d_x)
                    break
                t *= 0.5
            else:
                break
        return Z.ravel()

    zf = x.ravel().copy()
    prev_viol = violation(zf)
    status = "converged"
    total_iter = 0
    for mu in mu_ladder:
        res = minimize(stage_obj, zf, args=(mu,), jac=True, method="L-BFGS-B",
                       options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-12})
        zf = polish(res.x, mu)
        total_iter += int(res.nit)
        viol = violation(zf)
        if viol > max(prev_viol * 1.5, 1e-12) and viol > 1e-10:
            status = "diverged"
            break
        prev_viol = viol

    Z = zf.reshape(n, d_x)
    qhat = 0.5 * float(np.mean(np.sum((Z - x) ** 2, axis=1)))
    Hi = model.eval_H(Z, theta)
    A = Hi.transpose(0, 2, 1).reshape(n * d_x, model.d_g)
    b = (Z - x).reshape(n * d_x)
    lam, *_ = np.linalg.lstsq(A, b, rcond=None)
    foc_z = float(np.max(np.sqrt(np.sum(
        (Z - x - np.einsum("nkx,k->nx", Hi, lam)) ** 2, axis=1))))
    return InnerSolution(z=Z, lam=lam, qhat=qhat, iterations=total_iter,
                         status=status, foc_z_residual=foc_z,
                         foc_g_residual=prev_viol)


# ---------------------------------------------------------------------------
# Implicit transport map and its derivatives
# ---------------------------------------------------------------------------

def _newton_root(model, x, theta, lam, start, tol, max_iter, proj=None):
    """Newton iteration for z - (P) H(z)'lam = x from ``start``; None on failure.

    Steps are clipped to a local trust radius so the iteration settles on the
    root nearest its start instead of jumping across branches when the
    sensitivity H is non-monotone in z.  ``proj`` optionally projects the
    correction onto the allowed-error subspace of a constrained problem.
    """
    z = start.copy()
    eye = np.eye(model.d_x)

    def resid_at(z):
        step = model.eval_H(z, theta).T @ lam
        if proj is not None:
            step = proj @ step
        return z - step - x

    for _ in range(max_iter):
        resid = resid_at(z)
        if not np.all(np.isfinite(resid)):
            return None
        if np.linalg.norm(resid) <= tol:
            return z
        hz = model.eval_hess_zz(z, theta, lam)
        J = eye - (hz if proj is None else proj @ hz)
        try:
            step = np.linalg.solve(J, resid)
        except np.linalg.LinAlgError:
            return None
        clip = 0.5 * (1.0 + np.linalg.norm(z) + np.linalg.norm(x))
        norm = np.linalg.norm(step)
        if norm > clip:
            step = step * (clip / norm)
        z = z - step
    if np.linalg.norm(resid_at(z)) <= tol * 1e3:
        return z
    return None


def q_map(model: MomentModel, x: np.ndarray, theta: np.ndarray, lam: np.ndarray,
          tol: float = 1e-12, max_iter: int = 50, n_multistart: int = 8,
          proj: Optional[np.ndarray] = None) -> np.ndarray:
    """Invert the stationarity condition: the z with ``z - (P) H(z, theta)'lam = x``.

    Newton from ``z = x``; if that stalls, multistart from perturbed points and
    return the root closest to ``x`` (ties within 1e-9 go to the unperturbed
    start, for determinism).
    """
    x = np.asarray(x, dtype=float).reshape(model.d_x)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))

    base = _newton_root(model, x, theta, lam, x, tol, max_iter, proj)
    if base is not None:
        return base
    rng = np.random.default_rng(271828)
    scale = 0.1 * (1.0 + np.linalg.norm(x))
    roots = []
    for k in range(1, n_multistart + 1):
        start = x + scale * rng.standard_normal(model.d_x)
        root = _newton_root(model, x, theta, lam, start, tol, max_iter, proj)
        if root is not None:
            roots.append((float(np.sum((root - x) ** 2)), k, root))
    if not roots:
        raise NoRootError(
            f"no root of the transport stationarity condition near x={x}")
    # branch rule: smallest ||z - x||^2; distances within 1e-9 are a tie and
    # the earliest start (the one closest in spirit to the unperturbed x) wins
    min_dist = min(r[0] for r in roots)
    tied = [r for r in roots if r[0] <= min_dist + 1e-9]
    return min(tied, key=lambda r: r[1])[2]


def q_map_batch(model: MomentModel, X: np.ndarray, theta: np.ndarray,
                lam: np.ndarray, tol: float = 1e-12, max_iter: int = 50,
                proj: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorized Newton for the transport map over all rows of ``X``.

    Rows where the joint iteration fails fall back to the single-point solver
    with multistart.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    n, d_x = X.shape
    Z = X.copy()
    active = np.ones(n, dtype=bool)

    def resid_at(Za, Xa):
        step = np.einsum("nkx,k->nx", model.eval_H(Za, theta), lam)
        if proj is not None:
            step = step @ proj.T
        return Za - step - Xa

    for _ in range(max_iter):
        if not active.any():
            break
        Za, Xa = Z[active], X[active]
        resid = resid_at(Za, Xa)
        rnorm = np.sqrt(np.sum(resid ** 2, axis=1))
        done = np.isfinite(rnorm) & (rnorm <= tol)
        if done.any():
            idx = np.flatnonzero(active)
            active[idx[done]] = False
            if not active.any():
                break
            Za, Xa, resid = Za[~done], Xa[~done], resid[~done]
        hz = model.eval_hess_zz(Za, theta, lam)
        if proj is not None:
            hz = np.einsum("xy,nyz->nxz", proj, hz)
        J = np.eye(d_x)[None] - hz
        try:
            step = np.linalg.solve(J, resid[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            break
        clip = 0.5 * (1.0 + np.linalg.norm(Za, axis=1) + np.linalg.norm(Xa, axis=1))
        norm = np.linalg.norm(step, axis=1)
        factor = np.where(norm > clip, clip / np.maximum(norm, 1e-300), 1.0)
        updated = Za - step * factor[:, None]
        if not np.all(np.isfinite(updated)):
            break
        Z[active] = updated
    # verify and repair leftovers one point at a time
    bad = np.sqrt(np.sum(resid_at(Z, X) ** 2, axis=1)) > tol * 1e3
    for i in np.flatnonzero(bad):
        Z[i] = q_map(model, X[i], theta, lam, tol=tol, max_iter=max_iter, proj=proj)
    return Z


def _implicit_factor(model, z, theta, lam):
    J = np.eye(model.d_x) - model.eval_hess_zz(z, theta, lam)
    cond = cond_estimate(J)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularMatrixError("I - d2(lam'g)/dz dz'", cond)
    return J


def dq_dtheta(model: MomentModel, x, theta, lam) -> np.ndarray:
    """d q / d theta' = (I - d2(lam'g)/dzdz')^{-1} d2(lam'g)/dz dtheta' at z = q."""
    z = q_map(model, x, theta, lam)
    J = _implicit_factor(model, z, theta, lam)
    return np.linalg.solve(J, model.eval_hess_ztheta(z, theta, lam))


def dq_dlambda(model: MomentModel, x, theta, lam) -> np.ndarray:
    """d q / d lambda' = (I - d2(lam'g)/dzdz')^{-1} H(q)' at z = q."""
    z = q_map(model, x, theta, lam)
    J = _implicit_factor(model, z, theta, lam)
    return np.linalg.solve(J, model.eval_H(z, theta).T)


def dq_batch(model: MomentModel, X, theta, lam, Z=None, proj=None):
    """Batched ``(dq_dtheta, dq_dlambda)`` for all rows; reuses ``Z`` if given."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Z is None:
        Z = q_map_batch(model, X, theta, lam, proj=proj)
    hz = model.eval_hess_zz(Z, theta, lam)
    hzt = model.eval_hess_ztheta(Z, theta, lam)
    Ht = model.eval_H(Z, theta).transpose(0, 2, 1)
    if proj is not None:
        hz = np.einsum("xy,nyz->nxz", proj, hz)
        hzt = np.einsum("xy,nyz->nxz", proj, hzt)
        Ht = np.einsum("xy,nyk->nxk", proj, Ht)
    J = np.eye(model.d_x)[None] - hz
    cond = max(cond_estimate(J[i]) for i in range(min(len(J), 4)))
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularMatrixError("I - (P) d2(lam'g)/dz dz'", cond)
    dqt = np.linalg.solve(J, hzt)
    dql = np.linalg.solve(J, Ht)
    return dqt, dql, Z


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceDiagnostic:
    """Advisory contraction indicators for a converged inner solution."""

    lam_norm: float
    min_eig_weighting: float
    spectral_proxy: float        # max_j ||lam|| * ||d2(lam'g)/dzdz'(z_j)||
    contraction_plausible: bool = field(init=False)

    def __post_init__(self):
        self.contraction_plausible = (self.spectral_proxy < 1.0
                                      and self.min_eig_weighting > 0.0)

    def to_dict(self) -> dict:
        return {
            "lam_norm": self.lam_norm,
            "min_eig_weighting": self.min_eig_weighting,
            "spectral_proxy": self.spectral_proxy,
            "contraction_plausible": self.contraction_plausible,
        }


def convergence_diagnostic(model: MomentModel, data: Dataset,
                           solution: InnerSolution, theta) -> ConvergenceDiagnostic:
    """Report the quantities governing local contraction of the fixed point."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    Hi = model.eval_H(solution.z, theta)
    M = np.einsum("nkx,nlx->kl", Hi, Hi) / data.n
    eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
    hz = model.eval_hess_zz(solution.z, theta, solution.lam)
    spectral = float(np.linalg.norm(solution.lam)
                     * max(np.linalg.norm(hz[i], 2) for i in range(data.n)))
    return ConvergenceDiagnostic(
        lam_norm=float(np.linalg.norm(solution.lam)),
        min_eig_weighting=float(eigs.min()),
        spectral_proxy=spectral,
    )

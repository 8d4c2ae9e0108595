"""Command-line interface: estimate on CSV data, run simulation studies, self-check.

Every run is a pure function of (config file, data file, seed): reports carry
no timestamps and all randomness flows through the configured seeds, so
repeated invocations produce byte-identical files.  Errors print a single
machine-parseable header line on stderr and exit with a documented code:
2 config, 3 data, 4 solver, 5 failed checks.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from ._linalg import SingularMatrixError
from .dgps import DGP_IDS, DgpSpec, dgp_model
from .estimators import (EstimationError, estimate_efficient_gmm,
                         estimate_linearized, estimate_otgmm, solve_joint_foc)
from .inference import error_sd_report
from .models import Dataset, ErrorConstraint, add_constant_column, make_linear_iv
from .simulation import ESTIMATOR_IDS, StudyConfig, run_study
from .transport import NoRootError, SolverOptions
from .validate import run_all_checks

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SOLVER = 4
EXIT_CHECK = 5

METHODS = ("otgmm", "linearized_otgmm", "otgmm_joint_foc", "efficient_gmm")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        self.code = code
        self.kind = kind
        super().__init__(message)


def _fail(code: int, kind: str, message: str) -> CliError:
    return CliError(code, kind, message)


def _emit_error(err: CliError):
    print(f"otgmm-error code={err.code} kind={err.kind} message={err}",
          file=sys.stderr)


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise _fail(EXIT_CONFIG, "config", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise _fail(EXIT_CONFIG, "config", f"invalid JSON in {path}: {exc}") from None


def _solver_options(cfg: dict) -> SolverOptions:
    try:
        return SolverOptions(**cfg.get("solver", {}))
    except (TypeError, ValueError) as exc:
        raise _fail(EXIT_CONFIG, "config", f"bad solver options: {exc}") from None


def _write(path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _json_text(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _detect_dummies(data: Dataset, skip: set) -> list:
    names = []
    for j, name in enumerate(data.columns):
        if name in skip:
            continue
        if np.unique(data.values[:, j]).size <= 2:
            names.append(name)
    return names


def _build_constraint(cfg: dict, data: Dataset, model) -> ErrorConstraint | None:
    spec = cfg.get("constraint", {}) or {}
    names = list(spec.get("error_free", []))
    info = getattr(model, "iv_info", None)
    skip = {info.y_col} if info is not None else set()
    if info is not None:
        names.extend(n for n in info.error_free if n not in names)
    if spec.get("auto_dummies", False):
        names.extend(n for n in _detect_dummies(data, skip) if n not in names)
    for name in names:
        if name not in data.columns:
            raise _fail(EXIT_CONFIG, "config",
                        f"constraint column '{name}' not in dataset")
    weights = None
    if spec.get("weights") is not None:
        weights = np.ones(data.d_x)
        for name, val in spec["weights"].items():
            if name not in data.columns:
                raise _fail(EXIT_CONFIG, "config",
                            f"weight column '{name}' not in dataset")
            weights[data.column_index(name)] = float(val)
    if not names and weights is None:
        return None
    try:
        return ErrorConstraint.for_columns(data, names, weights)
    except ValueError as exc:
        raise _fail(EXIT_CONFIG, "config", f"bad constraint: {exc}") from None


def _resolve_model(cfg: dict, data: Dataset):
    spec = cfg.get("model")
    if not spec:
        raise _fail(EXIT_CONFIG, "config", "config is missing 'model'")
    kind = spec.get("type")
    if kind == "linear_iv":
        try:
            if spec.get("intercept", False) and "const" not in data.columns:
                data = add_constant_column(data)
            model = make_linear_iv(data.columns, spec["y"], spec.get("r", []),
                                   spec.get("w", []), spec.get("intercept", False))
        except KeyError as exc:
            raise _fail(EXIT_CONFIG, "config", f"model column error: {exc}") from None
        except ValueError as exc:
            raise _fail(EXIT_CONFIG, "config", str(exc)) from None
        return model, data, list(model.iv_info.r_cols)
    if kind == "dgp":
        dgp_id = spec.get("id")
        if dgp_id not in DGP_IDS:
            raise _fail(EXIT_CONFIG, "config", f"unknown dgp id '{dgp_id}'")
        return dgp_model(dgp_id, data), data, ["theta"]
    raise _fail(EXIT_CONFIG, "config", f"unknown model type '{kind}'")


def cmd_estimate(cfg: dict, out_dir: str) -> int:
    data_path = cfg.get("data")
    if not data_path:
        raise _fail(EXIT_CONFIG, "config", "config is missing 'data'")
    try:
        data = Dataset.from_csv(data_path)
    except FileNotFoundError:
        raise _fail(EXIT_DATA, "data", f"data file not found: {data_path}") from None
    except ValueError as exc:
        raise _fail(EXIT_DATA, "data", str(exc)) from None

    method = cfg.get("method", "otgmm")
    if method not in METHODS:
        raise _fail(EXIT_CONFIG, "config", f"unknown method '{method}'")
    model, data, coef_names = _resolve_model(cfg, data)
    constraint = _build_constraint(cfg, data, model)
    opts = _solver_options(cfg)

    try:
        if method == "otgmm":
            res = estimate_otgmm(model, data, opts=opts, constraint=constraint,
                                 compute_test=True)
        elif method == "linearized_otgmm":
            res = estimate_linearized(model, data, constraint=constraint)
        elif method == "otgmm_joint_foc":
            res = solve_joint_foc(model, data)
        else:
            res = estimate_efficient_gmm(model, data)
    except (EstimationError, SingularMatrixError, NoRootError) as exc:
        raise _fail(EXIT_SOLVER, "solver", f"estimation failed: {exc}") from None

    payload = res.to_dict()
    payload["coefficients"] = {
        name: {"estimate": float(res.theta_hat[i]),
               "se": float(res.se[i]) if res.se is not None else None}
        for i, name in enumerate(coef_names)}
    lines = [f"method: {res.method}", "",
             f"{'coefficient':<24}{'estimate':>14}{'se':>14}"]
    for i, name in enumerate(coef_names):
        se = f"{res.se[i]:.6g}" if res.se is not None else "-"
        lines.append(f"{name:<24}{res.theta_hat[i]:>14.6g}{se:>14}")
    if res.lambda_hat is not None:
        lines += ["", f"qhat: {res.qhat:.6g}",
                  "lambda: " + " ".join(f"{v:.6g}" for v in res.lambda_hat)]
    if res.test is not None:
        lines += ["", f"error-absence test: stat={res.test['stat']:.6g} "
                      f"df={res.test['df']} pvalue={res.test['pvalue']:.4g}"]
    if res.z_hat is not None:
        sd_report = error_sd_report(res.z_hat, data)
        payload["error_sd_report"] = sd_report
        lines += ["", f"{'column':<24}{'sd(z-x)':>14}{'sd(x)':>14}"]
        for name, rec in sd_report.items():
            lines.append(f"{name:<24}{rec['sd_correction']:>14.6g}"
                         f"{rec['sd_observed']:>14.6g}")

    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "report.json"), _json_text(payload))
    _write(os.path.join(out_dir, "report.txt"), "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _study_config(cfg: dict) -> StudyConfig:
    entries = cfg.get("dgps")
    if not entries:
        raise _fail(EXIT_CONFIG, "config", "config is missing 'dgps'")
    try:
        specs = []
        for entry in entries:
            sigmas = entry.get("sigmas", [entry.get("sigma", 0.0)])
            for sigma in sigmas:
                specs.append(DgpSpec(entry["id"], entry["latent"],
                                     float(sigma), int(entry.get("n", 100))))
        return StudyConfig(
            dgps=tuple(specs),
            estimators=tuple(cfg.get("estimators", list(ESTIMATOR_IDS))),
            replications=int(cfg.get("replications", 1000)),
            master_seed=int(cfg.get("master_seed", 0)),
            parallel_workers=int(cfg.get("workers", 1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise _fail(EXIT_CONFIG, "config", f"bad study config: {exc}") from None


def cmd_simulate(cfg: dict, out_dir: str) -> int:
    config = _study_config(cfg)
    report = run_study(config)
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "report.csv"), report.to_csv_text())
    _write(os.path.join(out_dir, "report_wide.csv"), report.to_wide_text())
    _write(os.path.join(out_dir, "report.json"), report.to_json_text())
    print(f"simulate: {len(report.rows)} cells x {config.replications} "
          f"replications in {report.wall_time:.1f}s (seed {config.master_seed})",
          file=sys.stderr)
    worst = max((r["failures"] / config.replications for r in report.rows),
                default=0.0)
    if worst > 0.2:
        raise _fail(EXIT_SOLVER, "solver",
                    f"systematic estimator failure: {worst:.0%} of replications "
                    f"failed in at least one cell")
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def cmd_check(cfg: dict) -> int:
    ok, lines = run_all_checks()
    print("\n".join(lines))
    if not ok:
        failed = [ln.split(" ", 1)[1].split()[0] for ln in lines
                  if ln.startswith("FAIL")]
        raise _fail(EXIT_CHECK, "check",
                    f"{len(failed)} validation check(s) failed: " + "; ".join(failed))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otgmm",
        description="Moment estimation by minimal transport of the data")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="estimate a model from CSV data")
    p_est.add_argument("--config", required=True)
    p_est.add_argument("--data", help="override the config's data path")
    p_est.add_argument("--method", choices=METHODS)
    p_est.add_argument("--out", default=".", help="report directory")

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", default=".", help="report directory")
    p_sim.add_argument("--seed", type=int, help="override master_seed")
    p_sim.add_argument("--workers", type=int)
    p_sim.add_argument("--replications", type=int)

    p_chk = sub.add_parser("check", help="run solver and derivative self-checks")
    p_chk.add_argument("--config")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "estimate":
            cfg = _load_config(args.config)
            for key, val in (("data", args.data), ("method", args.method)):
                if val is not None:
                    cfg[key] = val
            return cmd_estimate(cfg, args.out)
        if args.command == "simulate":
            cfg = _load_config(args.config)
            for key, val in (("master_seed", args.seed),
                             ("workers", args.workers),
                             ("replications", args.replications)):
                if val is not None:
                    cfg[key] = val
            return cmd_simulate(cfg, args.out)
        cfg = _load_config(args.config) if args.config else {}
        return cmd_check(cfg)
    except CliError as err:
        _emit_error(err)
        return err.code


if __name__ == "__main__":
    sys.exit(main())

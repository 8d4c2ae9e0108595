"""Moment-condition models, datasets, and error constraints.

A :class:`MomentModel` bundles the per-observation moment function
``g(z, theta)`` with its first derivatives ``H = dg/dz'`` and ``G = dg/dtheta'``
and the three second-derivative blocks of ``lambda'g`` that the large-error
covariance needs.  Evaluators are vectorized over observations: they accept a
single point ``(d_x,)`` or a batch ``(n, d_x)`` and return correspondingly
shaped arrays.  Missing derivatives are filled in by central finite
differences and flagged.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._linalg import SingularMatrixError, inv_checked, symmetrize

__all__ = [
    "Dataset",
    "MomentModel",
    "ErrorConstraint",
    "DomainError",
    "DerivativeReport",
    "eval_moment_stack",
    "check_derivatives",
    "projection_matrix",
    "make_mean_model",
    "make_coordinate_mean_model",
    "make_square_model",
    "make_linear_iv",
    "add_constant_column",
]

FD_STEP = 1e-6


class DomainError(ValueError):
    """A model evaluator produced a non-finite value on finite input."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"{message} (row {row})")


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """An n x d_x matrix of observed points with named columns."""

    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError("dataset must be a nonempty 2-d array")
        if len(self.columns) != values.shape[1]:
            raise ValueError("column names must match the number of columns")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(
                f"non-finite value in column '{self.columns[j]}', row {i + 1}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d_x(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_index(name)]

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"unknown column '{name}'") from None

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Load a header-row CSV of decimal-point reals; missing cells are a hard error."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty file") from None
            columns = tuple(name.strip() for name in header)
            rows = []
            for i, row in enumerate(reader, start=2):
                if len(row) != len(columns):
                    raise ValueError(
                        f"{path}: line {i} has {len(row)} fields, expected {len(columns)}")
                parsed = []
                for name, cell in zip(columns, row):
                    cell = cell.strip()
                    if not cell:
                        raise ValueError(
                            f"{path}: missing value in column '{name}', line {i}")
                    try:
                        parsed.append(float(cell))
                    except ValueError:
                        raise ValueError(
                            f"{path}: non-numeric value '{cell}' in column "
                            f"'{name}', line {i}") from None
                rows.append(parsed)
        if not rows:
            raise ValueError(f"{path}: no data rows")
        return cls(np.asarray(rows, dtype=float), columns)


def add_constant_column(data: Dataset, name: str = "const") -> Dataset:
    """Append a column of ones (used for intercept terms in linear IV models)."""
    if name in data.columns:
        raise ValueError(f"column '{name}' already exists")
    values = np.hstack([data.values, np.ones((data.n, 1))])
    return Dataset(values, data.columns + (name,))


# ---------------------------------------------------------------------------
# MomentModel
# ---------------------------------------------------------------------------

def _as_batch(z: np.ndarray, d_x: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        if z.shape[0] != d_x:
            raise ValueError(f"point has length {z.shape[0]}, expected {d_x}")
        return z[None, :], True
    if z.ndim != 2 or z.shape[1] != d_x:
        raise ValueError(f"batch has shape {z.shape}, expected (n, {d_x})")
    return z, False


@dataclass(frozen=True)
class MomentModel:
    """Per-observation moment function with derivative evaluators.

    Evaluator signatures (``Z`` is ``(n, d_x)`` or ``(d_x,)``):

    - ``g(Z, theta) -> (n, d_g)``
    - ``H(Z, theta) -> (n, d_g, d_x)``, the derivative in the observation,
    - ``G(Z, theta) -> (n, d_g, d_theta)``, the derivative in the parameter,
    - ``hess_zz(Z, theta, lam) -> (n, d_x, d_x)``
    - ``hess_ztheta(Z, theta, lam) -> (n, d_x, d_theta)``
    - ``hess_thetatheta(Z, theta, lam) -> (n, d_theta, d_theta)``

    the hessians being second derivatives of the scalar ``lam' g(z, theta)``.
    Evaluators left as ``None`` are replaced by finite differences and their
    names recorded in ``fd_fallbacks``.
    """

    name: str
    d_g: int
    d_x: int
    d_theta: int
    g: Callable
    H: Optional[Callable] = None
    G: Optional[Callable] = None
    hess_zz: Optional[Callable] = None
    hess_ztheta: Optional[Callable] = None
    hess_thetatheta: Optional[Callable] = None
    theta_init: Optional[np.ndarray] = None
    fd_fallbacks: tuple[str, ...] = ()

    def __post_init__(self):
        if self.d_g < self.d_theta:
            raise ValueError(
                f"underidentified model: d_g={self.d_g} < d_theta={self.d_theta}")
        filled = []
        updates = {}
        if self.H is None:
            updates["H"] = _fd_H(self.g, self.d_x)
            filled.append("H")
        if self.G is None:
            updates["G"] = _fd_G(self.g, self.d_theta)
            filled.append("G")
        H = updates.get("H", self.H)
        if self.hess_zz is None:
            updates["hess_zz"] = _fd_hess_zz(H, self.d_x)
            filled.append("hess_zz")
        if self.hess_ztheta is None:
            updates["hess_ztheta"] = _fd_hess_ztheta(H, self.d_theta)
            filled.append("hess_ztheta")
        if self.hess_thetatheta is None:
            G = updates.get("G", self.G)
            updates["hess_thetatheta"] = _fd_hess_thetatheta(G, self.d_theta)
            filled.append("hess_thetatheta")
        if filled:
            updates["fd_fallbacks"] = self.fd_fallbacks + tuple(filled)
        for key, value in updates.items():
            object.__setattr__(self, key, value)

    # -- batch-safe evaluation helpers -------------------------------------

    def eval_g(self, Z, theta) -> np.ndarray:
        Z, single = _as_batch(Z, self.d_x)
        out = np.asarray(self.g(Z, np.asarray(theta, dtype=float)), dtype=float)
        return out[0] if single else out

    def eval_H(self, Z, theta) -> np.ndarray:
        Z, single = _as_batch(Z, self.d_x)
        out = np.asarray(self.H(Z, np.asarray(theta, dtype=float)), dtype=float)
        return out[0] if single else out

    def eval_G(self, Z, theta) -> np.ndarray:
        Z, single = _as_batch(Z, self.d_x)
        out = np.asarray(self.G(Z, np.asarray(theta, dtype=float)), dtype=float)
        return out[0] if single else out

    def eval_hess_zz(self, Z, theta, lam) -> np.ndarray:
        Z, single = _as_batch(Z, self.d_x)
        out = np.asarray(self.hess_zz(Z, np.asarray(theta, dtype=float),
                                      np.asarray(lam, dtype=float)), dtype=float)
        return out[0] if single else out

    def eval_hess_ztheta(self, Z, theta, lam) -> np.ndarray:
        Z, single = _as_batch(Z, self.d_x)
        out = np.asarray(self.hess_ztheta(Z, np.asarray(theta, dtype=float),
                                          np.asarray(lam, dtype=float)), dtype=float)
        return out[0] if single else out

    def eval_hess_thetatheta(self, Z, theta, lam) -> np.ndarray:
        Z, single = _as_batch(Z, self.d_x)
        out = np.asarray(self.hess_thetatheta(Z, np.asarray(theta, dtype=float),
                                              np.asarray(lam, dtype=float)), dtype=float)
        return out[0] if single else out


# -- finite-difference fallbacks --------------------------------------------

def _steps(values: np.ndarray, scale: float = FD_STEP) -> np.ndarray:
    return scale * (1.0 + np.abs(values))


def _fd_H(g, d_x):
    def H(Z, theta):
        Z = np.atleast_2d(Z)
        n = Z.shape[0]
        cols = []
        for j in range(d_x):
            h = _steps(Z[:, j])
            zp, zm = Z.copy(), Z.copy()
            zp[:, j] += h
            zm[:, j] -= h
            cols.append((np.atleast_2d(g(zp, theta)) - np.atleast_2d(g(zm, theta)))
                        / (2.0 * h)[:, None])
        return np.stack(cols, axis=2).reshape(n, -1, d_x)
    return H


def _fd_G(g, d_theta):
    def G(Z, theta):
        Z = np.atleast_2d(Z)
        theta = np.asarray(theta, dtype=float)
        cols = []
        for m in range(d_theta):
            h = float(_steps(theta[m]))
            tp, tm = theta.copy(), theta.copy()
            tp[m] += h
            tm[m] -= h
            cols.append((np.atleast_2d(g(Z, tp)) - np.atleast_2d(g(Z, tm))) / (2.0 * h))
        return np.stack(cols, axis=2)
    return G


def _fd_hess_zz(H, d_x):
    # dz of z -> H(z, theta)' lam, one z-coordinate at a time
    def hess(Z, theta, lam):
        Z = np.atleast_2d(Z)
        n = Z.shape[0]
        out = np.empty((n, d_x, d_x))
        for j in range(d_x):
            h = _steps(Z[:, j])
            zp, zm = Z.copy(), Z.copy()
            zp[:, j] += h
            zm[:, j] -= h
            grad_p = np.einsum("nkx,k->nx", np.asarray(H(zp, theta)), lam)
            grad_m = np.einsum("nkx,k->nx", np.asarray(H(zm, theta)), lam)
            out[:, :, j] = (grad_p - grad_m) / (2.0 * h)[:, None]
        return 0.5 * (out + np.swapaxes(out, 1, 2))
    return hess


def _fd_hess_ztheta(H, d_theta):
    def hess(Z, theta, lam):
        Z = np.atleast_2d(Z)
        theta = np.asarray(theta, dtype=float)
        n = Z.shape[0]
        out = np.empty((n, Z.shape[1], d_theta))
        for m in range(d_theta):
            h = float(_steps(theta[m]))
            tp, tm = theta.copy(), theta.copy()
            tp[m] += h
            tm[m] -= h
            grad_p = np.einsum("nkx,k->nx", np.asarray(H(Z, tp)), lam)
            grad_m = np.einsum("nkx,k->nx", np.asarray(H(Z, tm)), lam)
            out[:, :, m] = (grad_p - grad_m) / (2.0 * h)
        return out
    return hess


def _fd_hess_thetatheta(G, d_theta):
    def hess(Z, theta, lam):
        Z = np.atleast_2d(Z)
        theta = np.asarray(theta, dtype=float)
        n = Z.shape[0]
        out = np.empty((n, d_theta, d_theta))
        for m in range(d_theta):
            h = float(_steps(theta[m]))
            tp, tm = theta.copy(), theta.copy()
            tp[m] += h
            tm[m] -= h
            grad_p = np.einsum("nkt,k->nt", np.asarray(G(Z, tp)), lam)
            grad_m = np.einsum("nkt,k->nt", np.asarray(G(Z, tm)), lam)
            out[:, :, m] = (grad_p - grad_m) / (2.0 * h)
        return 0.5 * (out + np.swapaxes(out, 1, 2))
    return hess


# ---------------------------------------------------------------------------
# Error constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorConstraint:
    """Declares coordinate combinations of the correction ``z - x`` forced to zero.

    ``C`` has one row per constraint (full row rank); ``weights`` optionally
    rescales the transport norm per coordinate.  Larger weight means the
    coordinate is allowed larger corrections: the cost of moving coordinate
    ``l`` is ``(z_l - x_l)^2 / weights[l]``.
    """

    C: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[0] == 0 or C.size == 0:
            C = C.reshape(0, C.shape[1] if C.ndim == 2 and C.shape[1] else 0)
        object.__setattr__(self, "C", C)
        if C.shape[0] > 0:
            if C.shape[0] > C.shape[1]:
                raise ValueError("more constraints than coordinates")
            if np.linalg.matrix_rank(C) < C.shape[0]:
                raise ValueError("constraint matrix C is rank deficient")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).ravel()
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be strictly positive finite")
            object.__setattr__(self, "weights", w)

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @classmethod
    def for_columns(cls, data: Dataset, error_free: Sequence[str],
                    weights: Optional[np.ndarray] = None) -> "ErrorConstraint":
        """Constraint pinning the named columns to be error free."""
        rows = np.zeros((len(error_free), data.d_x))
        for i, name in enumerate(error_free):
            rows[i, data.column_index(name)] = 1.0
        return cls(rows, weights)


def projection_matrix(constraint: ErrorConstraint | None, d_x: int | None = None) -> np.ndarray:
    """P = I - C'(CC')^{-1}C, the projector onto the allowed-error subspace.

    An empty constraint gives the identity; ``C = I`` gives the zero matrix.
    """
    if constraint is None or constraint.m == 0:
        if constraint is not None and constraint.C.shape[1]:
            d_x = constraint.C.shape[1]
        if d_x is None:
            raise ValueError("d_x required for an empty constraint")
        return np.eye(d_x)
    C = constraint.C
    try:
        CCt_inv = inv_checked(C @ C.T, "CC'")
    except SingularMatrixError:
        raise ValueError("constraint matrix C is rank deficient") from None
    return symmetrize(np.eye(C.shape[1]) - C.T @ CCt_inv @ C)


# ---------------------------------------------------------------------------
# Moment stacks and derivative validation
# ---------------------------------------------------------------------------

def eval_moment_stack(model: MomentModel, data: Dataset, z: np.ndarray,
                      theta: np.ndarray) -> dict:
    """Sample averages of g, HH', and G at transported points ``z``.

    Returns ``{"gbar": (d_g,), "Hbar_outer": (d_g, d_g), "Gbar": (d_g, d_theta)}``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape != data.values.shape:
        raise ValueError(f"z has shape {z.shape}, expected {data.values.shape}")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (model.d_theta,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({model.d_theta},)")

    gi = model.eval_g(z, theta)
    if not np.all(np.isfinite(gi)):
        row = int(np.argwhere(~np.isfinite(gi))[0][0])
        raise DomainError("moment function returned a non-finite value", row)
    Hi = model.eval_H(z, theta)
    Gi = model.eval_G(z, theta)
    for arr, label in ((Hi, "H"), (Gi, "G")):
        if not np.all(np.isfinite(arr)):
            row = int(np.argwhere(~np.isfinite(arr))[0][0])
            raise DomainError(f"derivative {label} returned a non-finite value", row)
    return {
        "gbar": gi.mean(axis=0),
        "Hbar_outer": np.einsum("nkx,nlx->kl", Hi, Hi) / data.n,
        "Gbar": Gi.mean(axis=0),
    }


@dataclass
class DerivativeReport:
    """Worst relative disagreement between analytic and finite-difference derivatives."""

    max_rel_err: dict = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_rel_err.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), 1.0)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_derivatives(model: MomentModel, points: Sequence[tuple], tol: float = 1e-5,
                      ) -> DerivativeReport:
    """Compare every analytic derivative against central finite differences.

    ``points`` is a sequence of ``(z, theta, lam)`` triples.  Blocks the model
    only has as finite-difference fallbacks are skipped (there is nothing
    independent to compare them to).
    """
    fd = {
        "H": _fd_H(model.g, model.d_x),
        "G": _fd_G(model.g, model.d_theta),
        "hess_zz": _fd_hess_zz(model.H, model.d_x),
        "hess_ztheta": _fd_hess_ztheta(model.H, model.d_theta),
        "hess_thetatheta": _fd_hess_thetatheta(model.G, model.d_theta),
    }
    analytic = {
        "H": lambda z, t, l: model.eval_H(z, t),
        "G": lambda z, t, l: model.eval_G(z, t),
        "hess_zz": lambda z, t, l: model.eval_hess_zz(z, t, l),
        "hess_ztheta": lambda z, t, l: model.eval_hess_ztheta(z, t, l),
        "hess_thetatheta": lambda z, t, l: model.eval_hess_thetatheta(z, t, l),
    }
    report = DerivativeReport(tol=tol)
    for name in fd:
        if name in model.fd_fallbacks:
            continue
        worst = 0.0
        for z, theta, lam in points:
            z = np.asarray(z, dtype=float).reshape(1, model.d_x)
            theta = np.atleast_1d(np.asarray(theta, dtype=float))
            lam = np.atleast_1d(np.asarray(lam, dtype=float))
            a = analytic[name](z, theta, lam)
            if name in ("H", "G"):
                num = np.asarray(fd[name](z, theta))
            else:
                num = np.asarray(fd[name](z, theta, lam))
            worst = max(worst, _rel_err(np.asarray(a), num))
        report.max_rel_err[name] = worst
    return report


# ---------------------------------------------------------------------------
# Built-in model constructors
# ---------------------------------------------------------------------------

def make_mean_model() -> MomentModel:
    """Scalar location model g(z, theta) = z - theta."""
    return make_coordinate_mean_model(1, name="mean")


def make_coordinate_mean_model(d: int, name: str | None = None) -> MomentModel:
    """d moments g_l = z_l - theta sharing one location parameter.

    With unequal column variances this is the textbook case where transport
    weighting and inverse-variance weighting differ.
    """
    def g(Z, theta):
        return Z - theta[0]

    def H(Z, theta):
        return np.broadcast_to(np.eye(d), (Z.shape[0], d, d)).copy()

    def G(Z, theta):
        return np.full((Z.shape[0], d, 1), -1.0)

    zeros = _zero_hessians(d_x=d, d_theta=1)
    return MomentModel(name=name or f"coordinate_mean_{d}", d_g=d, d_x=d, d_theta=1,
                       g=g, H=H, G=G, theta_init=np.zeros(1), **zeros)


def make_square_model() -> MomentModel:
    """Just-identified scalar model g(z, theta) = z^2 - theta."""
    def g(Z, theta):
        return Z ** 2 - theta[0]

    def H(Z, theta):
        return (2.0 * Z)[:, :, None].transpose(0, 2, 1)

    def G(Z, theta):
        return np.full((Z.shape[0], 1, 1), -1.0)

    def hess_zz(Z, theta, lam):
        return np.full((Z.shape[0], 1, 1), 2.0 * lam[0])

    def hess_zt(Z, theta, lam):
        return np.zeros((Z.shape[0], 1, 1))

    def hess_tt(Z, theta, lam):
        return np.zeros((Z.shape[0], 1, 1))

    return MomentModel(name="square", d_g=1, d_x=1, d_theta=1, g=g, H=H, G=G,
                       hess_zz=hess_zz, hess_ztheta=hess_zt, hess_thetatheta=hess_tt,
                       theta_init=np.ones(1))


def _zero_hessians(d_x: int, d_theta: int) -> dict:
    return {
        "hess_zz": lambda Z, t, l: np.zeros((np.atleast_2d(Z).shape[0], d_x, d_x)),
        "hess_ztheta": lambda Z, t, l: np.zeros((np.atleast_2d(Z).shape[0], d_x, d_theta)),
        "hess_thetatheta": lambda Z, t, l: np.zeros((np.atleast_2d(Z).shape[0], d_theta, d_theta)),
    }


@dataclass(frozen=True)
class LinearIVInfo:
    """Column bookkeeping for a linear instrumental-variables model."""

    y_col: str
    r_cols: tuple[str, ...]
    w_cols: tuple[str, ...]
    intercept: bool
    error_free: tuple[str, ...]


def make_linear_iv(columns: Sequence[str], y_col: str, r_cols: Sequence[str],
                   w_cols: Sequence[str], intercept: bool = False) -> MomentModel:
    """Linear IV moments g(z, theta) = w (y - r'theta) on named dataset columns.

    ``columns`` is the full column list of the dataset rows the model will see.
    With ``intercept=True`` a column named ``"const"`` must be present (see
    :func:`add_constant_column`); it joins both regressors and instruments and
    is reported as error free in ``model.iv_info``.  Regressors and instruments
    may share columns; the dependent column may not appear on either side.
    """
    columns = list(columns)
    r_cols = list(r_cols)
    w_cols = list(w_cols)
    if intercept:
        if "const" not in columns:
            raise KeyError("intercept requested but no 'const' column present")
        r_cols = r_cols + ["const"]
        w_cols = w_cols + ["const"]
    for name in [y_col] + r_cols + w_cols:
        if name not in columns:
            raise KeyError(f"unknown column '{name}'")
    if y_col in r_cols or y_col in w_cols:
        raise ValueError("dependent column cannot be a regressor or instrument")
    if len(set(r_cols)) != len(r_cols) or len(set(w_cols)) != len(w_cols):
        raise ValueError("duplicate column in regressors or instruments")

    d_x = len(columns)
    d_g = len(w_cols)
    d_theta = len(r_cols)
    if d_g < d_theta:
        raise ValueError(f"underidentified: {d_g} instruments < {d_theta} regressors")
    iy = columns.index(y_col)
    ir = np.array([columns.index(c) for c in r_cols])
    iw = np.array([columns.index(c) for c in w_cols])

    def g(Z, theta):
        resid = Z[:, iy] - Z[:, ir] @ theta
        return Z[:, iw] * resid[:, None]

    def H(Z, theta):
        n = Z.shape[0]
        resid = Z[:, iy] - Z[:, ir] @ theta
        out = np.zeros((n, d_g, d_x))
        w = Z[:, iw]
        out[:, :, iy] += w
        # dresid/dz_j = -theta_m on regressor columns
        out[:, :, ir] -= w[:, :, None] * theta[None, None, :]
        out[np.arange(n)[:, None], np.arange(d_g)[None, :], iw[None, :]] += resid[:, None]
        return out

    def G(Z, theta):
        return -Z[:, iw][:, :, None] * Z[:, ir][:, None, :]

    def hess_zz(Z, theta, lam):
        # lam'g = s(z) t(z) with s = lam'w linear, t = y - r'theta linear
        n = Z.shape[0]
        sv = np.zeros(d_x)
        np.add.at(sv, iw, lam)
        tv = np.zeros(d_x)
        tv[iy] += 1.0
        np.subtract.at(tv, ir, theta)
        block = np.outer(sv, tv)
        return np.broadcast_to(block + block.T, (n, d_x, d_x)).copy()

    def hess_ztheta(Z, theta, lam):
        n = Z.shape[0]
        sv = np.zeros(d_x)
        np.add.at(sv, iw, lam)
        s = Z[:, iw] @ lam
        out = -sv[None, :, None] * Z[:, None, ir]
        out[:, ir, np.arange(d_theta)] -= s[:, None]
        return out

    def hess_tt(Z, theta, lam):
        return np.zeros((Z.shape[0], d_theta, d_theta))

    model = MomentModel(name="linear_iv", d_g=d_g, d_x=d_x, d_theta=d_theta,
                        g=g, H=H, G=G, hess_zz=hess_zz, hess_ztheta=hess_ztheta,
                        hess_thetatheta=hess_tt, theta_init=None)
    object.__setattr__(model, "iv_info", LinearIVInfo(
        y_col=y_col, r_cols=tuple(r_cols), w_cols=tuple(w_cols),
        intercept=intercept, error_free=("const",) if intercept else ()))
    return model


def ols_theta_init(model: MomentModel, data: Dataset) -> np.ndarray:
    """Least-squares start value for a linear IV model; zeros otherwise."""
    info = getattr(model, "iv_info", None)
    if info is None:
        if model.theta_init is not None:
            return np.asarray(model.theta_init, dtype=float)
        return np.zeros(model.d_theta)
    y = data.column(info.y_col)
    R = np.column_stack([data.column(c) for c in info.r_cols])
    beta, *_ = np.linalg.lstsq(R, y, rcond=None)
    return beta

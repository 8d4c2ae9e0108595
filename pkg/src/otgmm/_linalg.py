"""Small linear-algebra helpers shared across the estimation stack.

Sandwich-type formulas amplify ill-conditioning, so every inversion in this
package goes through :func:`solve_checked`, which monitors the condition
number instead of silently returning garbage.
"""

from __future__ import annotations

import numpy as np

#: Condition number beyond which a matrix is treated as numerically singular.
COND_LIMIT = 1e12


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix required to be invertible is singular or too ill-conditioned.

    Carries the estimated condition number in ``cond`` (may be ``inf``).
    """

    def __init__(self, what: str, cond: float):
        self.what = what
        self.cond = cond
        super().__init__(f"{what} is numerically singular (cond ~ {cond:.3e})")


def cond_estimate(a: np.ndarray) -> float:
    """2-norm condition number, ``inf`` for exactly singular input."""
    try:
        return float(np.linalg.cond(a))
    except np.linalg.LinAlgError:
        return float("inf")


def solve_checked(a: np.ndarray, b: np.ndarray, what: str = "matrix",
                  cond_limit: float = COND_LIMIT) -> np.ndarray:
    """Solve ``a x = b`` with pivoting, raising if ``a`` is near singular."""
    a = np.asarray(a, dtype=float)
    c = cond_estimate(a)
    if not np.isfinite(c) or c > cond_limit:
        raise SingularMatrixError(what, c)
    return np.linalg.solve(a, b)


def inv_checked(a: np.ndarray, what: str = "matrix",
                cond_limit: float = COND_LIMIT) -> np.ndarray:
    """Condition-checked inverse; prefer :func:`solve_checked` when possible."""
    return solve_checked(a, np.eye(a.shape[0]), what, cond_limit)


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average away the floating-point asymmetry of a structurally symmetric matrix."""
    return 0.5 * (a + a.T)


def assert_psd(a: np.ndarray, what: str = "matrix",
               tol_scale: float = 1e-10) -> np.ndarray:
    """Check symmetric positive semidefiniteness up to ``-tol_scale * trace``.

    Returns the eigenvalues so callers can report them on failure.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    eig = np.linalg.eigvalsh(a)
    floor = -tol_scale * max(np.trace(a), 1.0)
    if eig.min() < floor:
        raise SingularMatrixError(f"{what} not PSD (min eig {eig.min():.3e})",
                                  cond_estimate(a))
    return eig


def null_space(a: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the null space of ``a`` (columns of the result)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    u, s, vh = np.linalg.svd(a, full_matrices=True)
    tol = rtol * (s[0] if s.size else 1.0)
    rank = int(np.sum(s > tol))
    return vh[rank:].T.copy()

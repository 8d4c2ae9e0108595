"""Moment estimation by minimal transport of the observed data.

Instead of reweighting observations to satisfy overidentified moment
conditions, the estimators here perturb observation *values* by the least
mean-square amount that makes all conditions hold, then estimate parameters,
asymptotic variances, and a test for whether any perturbation was needed.
"""

from .models import (Dataset, DomainError, ErrorConstraint, MomentModel,
                     add_constant_column, check_derivatives, eval_moment_stack,
                     make_coordinate_mean_model, make_linear_iv,
                     make_mean_model, make_square_model, projection_matrix)
from .transport import (InnerSolution, NoRootError, SolverOptions,
                        convergence_diagnostic, dq_dlambda, dq_dtheta,
                        inner_solve, oracle_inner_solve, q_map, q_map_batch)
from .estimators import (EstimateResult, EstimationError, estimate_efficient_gmm,
                         estimate_linearized, estimate_otgmm, solve_joint_foc)
from .inference import (LargeErrorComponents, LargeErrorResult,
                        error_absence_test, error_sd_report,
                        reference_variances_mean_model, variance_large_error,
                        variance_small_error)
from .dgps import DGP_IDS, LATENTS, THETA0, DgpSpec, dgp_model, sample_dgp
from .simulation import StudyConfig, StudyReport, run_study

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DomainError", "ErrorConstraint", "MomentModel",
    "add_constant_column", "check_derivatives", "eval_moment_stack",
    "make_coordinate_mean_model", "make_linear_iv", "make_mean_model",
    "make_square_model", "projection_matrix",
    "InnerSolution", "NoRootError", "SolverOptions", "convergence_diagnostic",
    "dq_dlambda", "dq_dtheta", "inner_solve", "oracle_inner_solve", "q_map",
    "q_map_batch",
    "EstimateResult", "EstimationError", "estimate_efficient_gmm",
    "estimate_linearized", "estimate_otgmm", "solve_joint_foc",
    "LargeErrorComponents", "LargeErrorResult", "error_absence_test",
    "error_sd_report", "reference_variances_mean_model", "variance_large_error",
    "variance_small_error",
    "DGP_IDS", "LATENTS", "THETA0", "DgpSpec", "dgp_model", "sample_dgp",
    "StudyConfig", "StudyReport", "run_study",
    "__version__",
]

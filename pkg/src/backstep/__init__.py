"""Step-controlled Newton methods in discrete function spaces.

The package separates four concerns: normed coefficient spaces and Riesz
maps (``spaces``), residual-minimizing Krylov solvers parameterized by those
inner products (``krylov``), the backward step size control loop
(``stepcontrol``), and 1-D discretizations plus contraction-rate-driven mesh
adaptation (``fem``, ``problems``, ``adaptive``).  ``cli`` bundles the
reproducible experiments.
"""

from .spaces import (ScalarSpace, SingularOperatorError, SpaceMismatchError,
                     StateVector, UniformGridSpace, riesz_representation,
                     u_norm, v_norm)
from .krylov import (IndefiniteOperatorError, InterpolationError, KrylovConfig,
                     KrylovResult, LinearOperatorSpec, alpha_interpolate, cg,
                     gmres)
from .stepcontrol import (BscConfig, Increment, IterationRecord,
                          OperatorFailureError, SolveOutcome, StepCollapseError,
                          StepControlState, check_sqrt_decrease, compute_g,
                          predict_step, select_step_size, solve, trace_to_json,
                          write_trace_csv)
from .fem import (FeSpace1D, Mesh1D, assemble_jacobian_action,
                  assemble_jacobian_matrix, assemble_residual,
                  cell_gradient_energy, transfer_solution)
from .problems import (ArctanProblem, CarrierProblem, GalerkinProblem,
                       Semilinear1D, carrier_semilinear, minimal_surface_1d,
                       minsurf_flux, minsurf_flux_jacobian, poisson_1d)
from .adaptive import (AdaptiveOutcome, KappaEstimate, RefinementPolicy,
                       adaptive_solve, estimate_kappa, mark_and_refine)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveOutcome", "ArctanProblem", "BscConfig", "CarrierProblem",
    "FeSpace1D", "GalerkinProblem", "Increment", "IndefiniteOperatorError",
    "InterpolationError", "IterationRecord", "KappaEstimate", "KrylovConfig",
    "KrylovResult", "LinearOperatorSpec", "Mesh1D", "OperatorFailureError",
    "RefinementPolicy", "ScalarSpace", "Semilinear1D", "SingularOperatorError",
    "SolveOutcome", "SpaceMismatchError", "StateVector", "StepCollapseError",
    "StepControlState", "UniformGridSpace", "adaptive_solve",
    "alpha_interpolate", "assemble_jacobian_action", "assemble_jacobian_matrix",
    "assemble_residual", "carrier_semilinear", "cell_gradient_energy", "cg",
    "check_sqrt_decrease", "compute_g", "estimate_kappa", "gmres",
    "mark_and_refine", "minimal_surface_1d", "minsurf_flux",
    "minsurf_flux_jacobian", "poisson_1d", "predict_step",
    "riesz_representation", "select_step_size", "solve", "trace_to_json",
    "transfer_solution", "u_norm", "v_norm", "write_trace_csv",
]

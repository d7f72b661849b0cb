"""Monte Carlo integration-by-parts weights for multiplicative-noise SDEs."""
__version__ = "0.1.0"

from .model import (ModelSpec, GeneratorSpec, ConjugatedCoeffs, build_conjugated, builtin_model,
                    builtin_names, validate_assumptions)
from .flow import (TimeGrid, NoisePath, Trajectory, SemilinearCoeffs, PathAbort, simulate_path,
                   simulate_paths, simulate_shifted_path, solve_semilinear_closed_form,
                   solve_semilinear_direct)
from .weight import WeightBreakdown, weight_for_path, batch_weights, weight_linearity_check
from .bounds import BoundConstants, bound_constants
from .estimator import (Estimate, TestFunction, RunOptions, get_test_function, estimate_lhs,
                        estimate_rhs, verify_ibp, check_moment_bounds, check_weight_moment,
                        density_log_gradient, perturbation_check)

__all__ = [
    "ModelSpec", "GeneratorSpec", "ConjugatedCoeffs", "build_conjugated", "builtin_model",
    "builtin_names", "validate_assumptions", "TimeGrid", "NoisePath", "Trajectory",
    "SemilinearCoeffs", "PathAbort", "simulate_path", "simulate_paths", "simulate_shifted_path",
    "solve_semilinear_closed_form", "solve_semilinear_direct", "WeightBreakdown",
    "weight_for_path", "batch_weights", "weight_linearity_check", "BoundConstants",
    "bound_constants", "Estimate", "TestFunction", "RunOptions", "get_test_function",
    "estimate_lhs", "estimate_rhs", "verify_ibp", "check_moment_bounds", "check_weight_moment",
    "density_log_gradient", "perturbation_check",
]

"""Policy optimization for quadratic control of Markov jump linear systems."""

from .core import (MarkovChain, MatTuple, MjlsProblem, Policy, ValueCertificate, apply_L,
                   apply_T, closed_loop, cost, evaluate, is_mss, lifted_matrix,
                   mode_expectation, solve_lyap_L, solve_lyap_T, spectral_radius,
                   state_correlation, value_matrices)
from .errors import (DimensionError, DomainError, GenerationFailed, MjlsError,
                     NotConvergedError, SingularSystem, StabilityError, StepRejected)
from .policy_opt import (ConstantBundle, MethodKind, OptTrace, Status, gain_residual, gradient,
                         hessian_form, max_step, mu_constant, optimize, smoothness_constants,
                         step, theoretical_rate, value_derivative)
from .riccati import CareSolution, optimal_gain, solve_care

__version__ = "0.1.0"

__all__ = [
    "CareSolution", "ConstantBundle", "DimensionError", "DomainError", "GenerationFailed", "MarkovChain",
    "MatTuple", "MethodKind", "MjlsError", "MjlsProblem", "NotConvergedError", "OptTrace",
    "Policy", "SingularSystem", "StabilityError", "Status", "StepRejected",
    "ValueCertificate", "apply_L", "apply_T", "closed_loop", "cost", "evaluate",
    "gain_residual", "gradient", "hessian_form", "is_mss", "lifted_matrix", "max_step",
    "mode_expectation", "mu_constant", "optimal_gain", "optimize", "smoothness_constants", "solve_care", "solve_lyap_L",
    "solve_lyap_T", "spectral_radius", "state_correlation", "step", "theoretical_rate",
    "value_derivative", "value_matrices", "__version__",
]

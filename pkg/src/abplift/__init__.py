"""Lifted random-dual thresholds for the asymmetric binary perceptron."""

__version__ = "0.1.0"

from .functional import (  # noqa: E402
    DomainError,
    LiftingPoint,
    Level1Point,
    QuadOrders,
    binary_term,
    default_orders,
    level1_threshold,
    psi_bar,
    psi_terms,
    quadratic_term,
    sphere_term,
)
from .kernels import BACKEND  # noqa: E402
from .lab import (  # noqa: E402
    AbpInstance,
    CapacityError,
    FeasibilityReport,
    exhaustive_feasible,
    generate_instance,
    local_search,
    satisfiability_curve,
)
from .quadrature import EvaluationError, ParameterError, QuadratureRule, make_hermite_rule  # noqa: E402
from .saddle import NonConvergenceError, SolverSettings, StationaryResult, solve_stationary  # noqa: E402
from .threshold import (  # noqa: E402
    BracketError,
    ThresholdResult,
    find_threshold,
    restricted_threshold,
    sweep_levels,
)

__all__ = [
    "AbpInstance", "BACKEND", "BracketError", "CapacityError", "DomainError", "EvaluationError",
    "FeasibilityReport", "LiftingPoint", "Level1Point", "NonConvergenceError", "ParameterError",
    "QuadOrders", "QuadratureRule", "SolverSettings", "StationaryResult", "ThresholdResult",
    "binary_term", "default_orders", "exhaustive_feasible", "find_threshold", "generate_instance",
    "level1_threshold", "local_search", "make_hermite_rule", "psi_bar", "psi_terms",
    "quadratic_term", "restricted_threshold", "satisfiability_curve", "sphere_term", "sweep_levels",
]

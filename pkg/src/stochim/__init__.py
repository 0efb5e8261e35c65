"""Random inertial manifolds for the stochastically forced damped wave equation."""
from .noise import (
    GridError,
    OUParams,
    OUPath,
    WienerPath,
    ergodic_stats,
    integral_of_z,
    sample_wiener,
    shift,
    stationary_z,
)
from .spectral import StateE, WaveSpec, eigen_data, inner_product_E, norm_E
from .rds import integrate, conjugate_additive, conjugate_multiplicative
from .perron import LPParams, check_gap, solve_backward, evaluate_h, build_chart
from .tracking import solve_tracking_point, measure_rate

__all__ = [
    "GridError", "OUParams", "OUPath", "WienerPath", "ergodic_stats", "integral_of_z",
    "sample_wiener", "shift", "stationary_z",
    "StateE", "WaveSpec", "eigen_data", "inner_product_E", "norm_E",
    "integrate", "conjugate_additive", "conjugate_multiplicative",
    "LPParams", "check_gap", "solve_backward", "evaluate_h", "build_chart",
    "solve_tracking_point", "measure_rate",
]

__version__ = "0.1.0"

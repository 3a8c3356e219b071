"""Continuous-time Kyle equilibrium with an insider who must reach a terminal holdings target.

Closed-form coefficients, calibration of the horizon constant, an
independent RK4 oracle, a Monte Carlo engine and the analysis that
compares them.
"""

__version__ = "0.1.0"

from .closed_form import DomainError, EquilibriumSolution, ModelParams
from .calibrate import CalibrationError, CalibrationResult, build_solution, calibrate_r0

__all__ = [
    "CalibrationError",
    "CalibrationResult",
    "DomainError",
    "EquilibriumSolution",
    "ModelParams",
    "build_solution",
    "calibrate_r0",
]

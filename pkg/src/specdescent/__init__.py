"""Spectral descent directions: stable fractional matrix powers, optimizers and diagnostics."""

__version__ = "0.1.0"

from .iterations import IterationPlan, IterationResult, expected_ledger, make_plan, run
from .linalg import CostLedger, Precision, fractional_power_oracle, sv_error, svd_oracle
from .remez import FitSchedule, fit_poly_schedule, fit_rational_schedule

__all__ = [
    "CostLedger",
    "FitSchedule",
    "IterationPlan",
    "IterationResult",
    "Precision",
    "expected_ledger",
    "fit_poly_schedule",
    "fit_rational_schedule",
    "fractional_power_oracle",
    "make_plan",
    "run",
    "sv_error",
    "svd_oracle",
]

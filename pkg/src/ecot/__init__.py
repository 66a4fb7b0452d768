"""Conformalized multiple testing that uses every available sample.

Permutation conformal p-values with fast symmetric reductions, conditional
calibration, approach selection, brute-force oracles and a Monte Carlo harness.
"""
from .core import (
    BudgetExceeded,
    CalibrationSet,
    ConfigurationError,
    ContractViolation,
    DomainError,
    ECOTError,
    MonteCarloReport,
    PValueVector,
    Reduction,
    RejectionReport,
    TestingProblem,
    fdp_and_power,
)
from .procedures import bh, conditional_calibration, label_assisted_null_proportion, storey_null_proportion
from .scorers import LearnerConfig, ScoreModel, SymmetryClass, fit_binary, fit_one_class

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded", "CalibrationSet", "ConfigurationError", "ContractViolation", "DomainError",
    "ECOTError", "MonteCarloReport", "PValueVector", "Reduction", "RejectionReport", "TestingProblem",
    "fdp_and_power", "bh", "conditional_calibration", "label_assisted_null_proportion",
    "storey_null_proportion", "LearnerConfig", "ScoreModel", "SymmetryClass", "fit_binary",
    "fit_one_class",
]

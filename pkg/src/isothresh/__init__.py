"""Threshold estimation for monotone regression with one- and two-stage isotonic designs."""

from .iso_core import (
    SampleBatch,
    StepFit,
    argmin_diagnostic,
    constrained_pava,
    invert_threshold,
    pava,
)

__all__ = [
    "SampleBatch",
    "StepFit",
    "argmin_diagnostic",
    "constrained_pava",
    "invert_threshold",
    "pava",
]

__version__ = "0.1.0"

"""Desk-scale laboratory for guided DDIM inversion with per-step scale selection."""

from .errors import (
    ConfigError,
    DegenerateTimestepError,
    IllPosedStateError,
    PolarisError,
    ScheduleLengthError,
)
from .guidance import (
    CosineDecay,
    Fixed,
    PolarisExact,
    PolarisRobust,
    RandomUniform,
    Replay,
    ScaleSchedule,
    cfg_combine,
    polaris_exact_delta,
    polaris_robust_scale,
)
from .oracle import AnalyticModel, Condition, PerturbedOracle, grid_mixture, perturbed
from .pipeline import invert, roundtrip, sample
from .schedule import build_schedule, subsample

__all__ = [
    "AnalyticModel",
    "Condition",
    "ConfigError",
    "CosineDecay",
    "DegenerateTimestepError",
    "Fixed",
    "IllPosedStateError",
    "PerturbedOracle",
    "PolarisError",
    "PolarisExact",
    "PolarisRobust",
    "RandomUniform",
    "Replay",
    "ScaleSchedule",
    "ScheduleLengthError",
    "build_schedule",
    "cfg_combine",
    "grid_mixture",
    "invert",
    "perturbed",
    "polaris_exact_delta",
    "polaris_robust_scale",
    "roundtrip",
    "sample",
    "subsample",
]

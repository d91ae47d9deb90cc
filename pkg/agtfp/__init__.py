"""agtfp: weather-response estimation and climate-change attribution for agricultural TFP."""

__version__ = "0.1.0"

from agtfp.config import BASELINE, ModelSpec, RunConfig
from agtfp.errors import (
    AgtfpError,
    ConfigError,
    ConvergenceError,
    CoverageError,
    DataValidationError,
    DomainError,
    NumericalError,
    ParseError,
    RankDeficientError,
    SweepFailure,
)

__all__ = [
    "__version__",
    "BASELINE",
    "ModelSpec",
    "RunConfig",
    "AgtfpError",
    "ConfigError",
    "ConvergenceError",
    "CoverageError",
    "DataValidationError",
    "DomainError",
    "NumericalError",
    "ParseError",
    "RankDeficientError",
    "SweepFailure",
]

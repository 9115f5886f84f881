"""Sequential hypothesis tests, changepoint detectors, overshoot corrections,
a Monte Carlo harness and an exact backward-induction oracle."""

from .engine import CONTINUE, PathBatch, TestOutcome, run_paths, run_stream
from .errors import (CalibrationError, CapacityError, ConvergenceError, DomainError, NumericError,
                     PreconditionError, SeqlabError)
from .harness import Estimate, McConfig, mc_run
from .model import Distribution, ExpFamily1D, SimpleModel, kl, llr_path, log_ratio

__version__ = "0.1.0"

__all__ = [
    "CONTINUE", "PathBatch", "TestOutcome", "run_paths", "run_stream",
    "CalibrationError", "CapacityError", "ConvergenceError", "DomainError", "NumericError",
    "PreconditionError", "SeqlabError",
    "Estimate", "McConfig", "mc_run",
    "Distribution", "ExpFamily1D", "SimpleModel", "kl", "llr_path", "log_ratio",
]

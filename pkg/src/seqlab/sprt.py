"""Wald's sequential probability ratio test and Lorden's bounds for it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import CONTINUE, DEFAULT_CAP, Procedure, TestOutcome, run_stream
from .errors import PreconditionError
from .model import SimpleModel

__all__ = ["SprtConfig", "TestOutcome", "SprtProcedure", "run_sprt", "wald_thresholds",
           "lorden_ess_upper", "error_prob_lower"]


@dataclass(frozen=True)
class SprtConfig:
    """Stop when the LLR of H1 against H0 leaves (a0, a1)."""

    a0: float
    a1: float

    def __post_init__(self):
        if not (self.a0 < 0 < self.a1):
            raise PreconditionError(f"SPRT thresholds need a0 < 0 < a1, got ({self.a0}, {self.a1})")


class SprtProcedure(Procedure):
    def __init__(self, model: SimpleModel, cfg: SprtConfig, i: int = 1, j: int = 0):
        self.model, self.cfg, self.i, self.j = model, cfg, i, j

    def init(self, m):
        return {"llr": np.zeros(m)}

    def advance(self, state, x):
        z = self.model[self.i].logpdf(x) - self.model[self.j].logpdf(x)
        state["llr"] = state["llr"] + z
        lam = state["llr"]
        return np.where(lam >= self.cfg.a1, 1, np.where(lam <= self.cfg.a0, 0, CONTINUE))

    def statistic(self, state):
        return state["llr"]

    def truncation_decision(self, state):
        return (state["llr"] > 0).astype(np.int64)


def run_sprt(model: SimpleModel, cfg: SprtConfig, stream, cap: int = DEFAULT_CAP,
             record_path: bool = False) -> TestOutcome:
    """Run the SPRT of H1 (index 1) against H0 (index 0) on a stream.

    Crossing is inclusive: lambda >= a1 accepts H1 and lambda <= a0 accepts H0.
    At the cap the run is flagged truncated and decided by the sign of the LLR.
    """
    if model.n_alt != 1:
        raise PreconditionError("the SPRT needs a two-hypothesis model")
    return run_stream(SprtProcedure(model, cfg), stream, cap, record_path)


def wald_thresholds(alpha0: float, alpha1: float) -> SprtConfig:
    """Wald's approximate thresholds for error rates alpha0 = P0(d=1), alpha1 = P1(d=0)."""
    if not (0 < alpha0 < 1 and 0 < alpha1 < 1 and alpha0 + alpha1 < 1):
        raise PreconditionError("error rates must lie in (0,1) with alpha0 + alpha1 < 1")
    return SprtConfig(math.log(alpha1 / (1 - alpha0)), math.log((1 - alpha1) / alpha0))


def _step(model_or_z, hypothesis):
    from .renewal import StepDistribution, llr_step

    if isinstance(model_or_z, StepDistribution):
        return model_or_z
    i, j = (1, 0) if hypothesis == 1 else (0, 1)
    return llr_step(model_or_z, i, j)


def lorden_ess_upper(model_or_z, cfg: SprtConfig, alpha1: float) -> float:
    """Upper bound on E_1[T] from Lorden's overshoot inequality.

    E_1[T] <= ((1-alpha1) a1 - alpha1 a0)/m + E[(Z+)^2]/m^2 with m = E_1[Z].
    Accepts a model (uses Z = lambda_10(1) under H1) or a step distribution.
    """
    z = _step(model_or_z, 1)
    m = z.mean
    if m <= 0:
        raise PreconditionError("the LLR increment must have positive mean under H1")
    return ((1 - alpha1) * cfg.a1 - alpha1 * cfg.a0) / m + z.pos_second_moment / m ** 2


def error_prob_lower(model_or_z, a: float, hypothesis: int = 1) -> float:
    """Lower bound on an SPRT error probability from the overshoot inequality.

    With ``hypothesis=1`` this bounds alpha0 = P0(d=1) for upper threshold ``a``
    using Z = lambda_10(1) under H1; with ``hypothesis=0`` it bounds alpha1 for
    lower threshold ``-a`` using Z = lambda_01(1) under H0.
    """
    if a <= 0:
        raise PreconditionError("threshold must be positive")
    z = _step(model_or_z, hypothesis)
    q = 1 - math.exp(-a)
    return q * math.exp(-(a + z.pos_second_moment / (q * z.mean)))

"""Group-sequential tests with two or three looks, built from first-order
sample-size predictions inflated by t^rho."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import CONTINUE, DEFAULT_CAP, Procedure, TestOutcome, run_stream
from .errors import PreconditionError
from .kiefer_weiss import theta_star
from .model import ExpFamily1D, SimpleModel, kl, mle_clamped
from .renewal import affine_llr_form


class AsymmetryWarning(UserWarning):
    """The two first-order sample sizes differ; two looks cannot serve both hypotheses."""


def stage_size(t: float, rho: float = 0.75) -> int:
    """n(t) = ceil(t + t^rho), with 1/2 < rho < 1."""
    if not 0.5 < rho < 1:
        raise PreconditionError("rho must lie strictly between 1/2 and 1")
    if t <= 0:
        raise PreconditionError("t must be positive")
    return int(math.ceil(t + t ** rho))


@dataclass(frozen=True)
class FixedSample:
    """Neyman-Pearson test on n observations: decide H1 when lambda_10(n) >= crit."""

    n: int
    crit: float
    level: float
    power: float


def _np_exact(form, ns, alpha0):
    """Critical sums and (level, power) for each sample size in ``ns``."""
    ns = np.asarray(ns)
    d0, d1 = form.dist_j(ns), form.dist_i(ns)  # H0 is hypothesis j=0, H1 is i=1
    if form.A > 0:
        if form.integer:
            k = d0.isf(alpha0) + 1  # smallest integer with P0(S >= k) <= alpha0
            level, power = d0.sf(k - 1), d1.sf(k - 1)
        else:
            k = d0.isf(alpha0)
            level, power = d0.sf(k), d1.sf(k)
    else:
        if form.integer:
            k = d0.ppf(alpha0) - 1  # largest integer with P0(S <= k) <= alpha0
            k = np.where(d0.cdf(k + 1) <= alpha0, k + 1, k)
            level, power = d0.cdf(k), d1.cdf(k)
        else:
            k = d0.ppf(alpha0)
            level, power = d0.cdf(k), d1.cdf(k)
    crit = form.A * k - ns * form.B
    return crit, level, power


def fixed_sample_size(model: SimpleModel, alpha0: float, alpha1: float, reps: int = 200_000,
                      seed: int = 0, n_max: int = 1_000_000) -> FixedSample:
    """Smallest n whose level-alpha0 likelihood-ratio test has power >= 1 - alpha1.

    Exact when the LLR is a monotone function of a sum with a known law;
    otherwise level and power are estimated by Monte Carlo with a fixed seed
    per candidate n.
    """
    if not (0 < alpha0 < 1 and 0 < alpha1 < 1):
        raise PreconditionError("error rates must lie in (0, 1)")
    form = affine_llr_form(model, 1, 0)
    if form is not None:
        hi = 16
        while True:
            ns = np.arange(1, hi + 1)
            crit, level, power = _np_exact(form, ns, alpha0)
            ok = np.nonzero(power >= 1 - alpha1)[0]
            if ok.size:
                k = ok[0]
                # a tiny slack so that lattice-valued LLRs at the critical value count as rejections
                slack = 1e-9 * max(1.0, abs(float(crit[k])))
                return FixedSample(int(ns[k]), float(crit[k]) - slack, float(level[k]), float(power[k]))
            if hi >= n_max:
                raise PreconditionError(f"no sample size up to {n_max} reaches the requested power")
            hi *= 2
    return _fixed_sample_mc(model, alpha0, alpha1, reps, seed, n_max)


def _fixed_sample_mc(model, alpha0, alpha1, reps, seed, n_max):
    from .harness import derive_rng

    def evaluate(n):
        z0 = np.zeros(reps)
        z1 = np.zeros(reps)
        r0, r1 = derive_rng(seed, 2 * n), derive_rng(seed, 2 * n + 1)
        for _ in range(n):
            x0, x1 = model[0].sample(r0, reps), model[1].sample(r1, reps)
            z0 += model[1].logpdf(x0) - model[0].logpdf(x0)
            z1 += model[1].logpdf(x1) - model[0].logpdf(x1)
        crit = float(np.quantile(z0, 1 - alpha0, method="higher"))
        return crit, float(np.mean(z0 >= crit)), float(np.mean(z1 >= crit))

    lo, hi = 0, 1
    while evaluate(hi)[2] < 1 - alpha1:
        lo, hi = hi, hi * 2
        if hi > n_max:
            raise PreconditionError(f"no sample size up to {n_max} reaches the requested power")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if evaluate(mid)[2] >= 1 - alpha1:
            hi = mid
        else:
            lo = mid
    crit, level, power = evaluate(hi)
    return FixedSample(hi, crit, level, power)


@dataclass(frozen=True)
class StageSchedule:
    """Look times, interim LLR limits (lower, upper) and the final NP critical value."""

    looks: tuple
    lower: float
    upper: float
    final_crit: float

    def __post_init__(self):
        if list(self.looks) != sorted(set(self.looks)) or self.looks[0] < 1:
            raise PreconditionError("look times must be strictly increasing positive integers")


class MultistageProcedure(Procedure):
    """Check the LLR at each look; stop when it leaves (lower, upper). At the
    last look decide by the Neyman-Pearson critical value. The terminal
    statistic is the number of stages used."""

    def __init__(self, model: SimpleModel, schedule: StageSchedule):
        self.model, self.schedule = model, schedule
        self.looks = np.asarray(schedule.looks)

    def init(self, m):
        return {"llr": np.zeros(m)}

    def advance(self, state, x):
        state["llr"] = state["llr"] + (self.model[1].logpdf(x) - self.model[0].logpdf(x))
        n = state["n"][0] if len(state["n"]) else 0
        if n not in self.looks:
            return np.full(len(state["llr"]), CONTINUE)
        lam = state["llr"]
        sc = self.schedule
        if n == self.looks[-1]:
            interim = np.where(lam >= sc.upper, 1, np.where(lam <= sc.lower, 0, CONTINUE))
            final = (lam >= sc.final_crit).astype(np.int64)
            return np.where(interim != CONTINUE, interim, final)
        return np.where(lam >= sc.upper, 1, np.where(lam <= sc.lower, 0, CONTINUE))

    def statistic(self, state):
        return (np.searchsorted(self.looks, state["n"]) + 1).astype(float)


def _first_order(model, alpha0, alpha1, halving):
    a0, a1 = (alpha0 / 2, alpha1 / 2) if halving else (alpha0, alpha1)
    I0, I1 = kl(model, 0, 1), kl(model, 1, 0)
    return a0, a1, abs(math.log(a1)) / I0, abs(math.log(a0)) / I1


def _schedule(model, interim, alpha0, alpha1, halving):
    a0, a1, _, _ = _first_order(model, alpha0, alpha1, halving)
    fs = fixed_sample_size(model, a0, a1)
    interim = sorted(set(interim))
    final = max(fs.n, interim[-1])
    looks = tuple(interim) if final == interim[-1] else tuple(interim) + (final,)
    crit = fs.crit if final == fs.n else _np_critical(model, final, a0)
    return StageSchedule(looks, math.log(a1), math.log(1 / a0), crit)


def _np_critical(model, n, alpha0):
    form = affine_llr_form(model, 1, 0)
    if form is None:
        raise PreconditionError("the final look needs an exact law for the LLR")
    crit, _, _ = _np_exact(form, np.array([n]), alpha0)
    return float(crit[0]) - 1e-9 * max(1.0, abs(float(crit[0])))


def two_stage_schedule(model: SimpleModel, alpha0: float, alpha1: float, rho: float = 0.75,
                       halving: bool = True, ratio_tol: float = 0.25) -> StageSchedule:
    """First look at n(t), t = max(|log alpha1|/I0, |log alpha0|/I1), then the
    fixed-sample test. With ``halving`` both stages use alpha/2. Warns when the
    two first-order sample sizes differ by more than ``ratio_tol``."""
    _, _, t1, t2 = _first_order(model, alpha0, alpha1, halving)
    if max(t1, t2) / min(t1, t2) > 1 + ratio_tol:
        warnings.warn(f"first-order sample sizes {t1:.4g} and {t2:.4g} are unbalanced; "
                      "a three-stage test is needed for efficiency under both hypotheses",
                      AsymmetryWarning, stacklevel=2)
    return _schedule(model, [stage_size(max(t1, t2), rho)], alpha0, alpha1, halving)


def three_stage_schedule(model: SimpleModel, alpha0: float, alpha1: float, rho: float = 0.75,
                         halving: bool = True, max_log_ratio: float = 100.0) -> StageSchedule:
    """Looks at min(n(t1), n(t2)) and max(n(t1), n(t2)), then the fixed-sample test."""
    ratio = math.log(alpha0) / math.log(alpha1)
    if not 1 / max_log_ratio <= ratio <= max_log_ratio:
        raise PreconditionError(f"log alpha0 / log alpha1 = {ratio:.4g} is outside "
                                f"[{1 / max_log_ratio:g}, {max_log_ratio:g}]")
    _, _, t1, t2 = _first_order(model, alpha0, alpha1, halving)
    return _schedule(model, [stage_size(t1, rho), stage_size(t2, rho)], alpha0, alpha1, halving)


def run_two_stage(model, alpha0, alpha1, stream, rho=0.75, halving=True, cap=DEFAULT_CAP) -> TestOutcome:
    return run_stream(MultistageProcedure(model, two_stage_schedule(model, alpha0, alpha1, rho, halving)),
                      stream, cap)


def run_three_stage_simple(model, alpha0, alpha1, stream, rho=0.75, halving=True,
                           cap=DEFAULT_CAP) -> TestOutcome:
    return run_stream(MultistageProcedure(model, three_stage_schedule(model, alpha0, alpha1, rho, halving)),
                      stream, cap)


class ThreeStageCompositeProcedure(Procedure):
    """Three looks for theta <= theta0 vs theta >= theta1.

    Stage 1 takes ceil(fraction n*) observations; stage 2 runs to
    min(n*, ceil((1 + eps) n(th))) with n(th) the smaller first-order sample
    size at the stage-1 MLE and eps = (log n*)^(-1/2); stage 3 runs to n*.
    Each look applies Schwarz's boundary n max_i I(th, theta_i) >= |log min alpha|
    and the last look forces the decision th >= theta*. If the stage-2 target
    is already reached, the stage-2 look is immediate and final.
    """

    def __init__(self, fam: ExpFamily1D, theta0: float, theta1: float, alpha0: float, alpha1: float,
                 interval: Optional[tuple] = None, fraction: float = 0.4):
        if not 0 < fraction < 1:
            raise PreconditionError("first-stage fraction must lie in (0, 1)")
        self.fam, self.theta0, self.theta1 = fam, theta0, theta1
        self.alpha0, self.alpha1 = alpha0, alpha1
        self.interval = interval or fam.theta_space
        self.ts, ns = theta_star(fam, theta0, theta1, alpha0, alpha1)
        self.n_star = int(math.ceil(ns))
        self.n1 = max(1, int(math.ceil(fraction * ns)))
        self.eps = 1.0 / math.sqrt(math.log(max(ns, math.e)))
        self.a = abs(math.log(min(alpha0, alpha1)))

    def n_of_theta(self, th):
        f = self.fam
        with np.errstate(divide="ignore"):
            return np.minimum(abs(math.log(self.alpha0)) / f.kl(th, self.theta0),
                              abs(math.log(self.alpha1)) / f.kl(th, self.theta1))

    def init(self, m):
        return {"s": np.zeros(m), "look": np.full(m, self.n1, dtype=np.int64), "stage": np.ones(m)}

    def advance(self, state, x):
        state["s"] = state["s"] + x
        n = state["n"]
        dec = np.full(len(n), CONTINUE)
        at = n == state["look"]
        if not at.any():
            return dec
        th = np.asarray(mle_clamped(self.fam, state["s"], n, self.interval, method="closed"), dtype=float)
        side = np.where(th >= self.ts, 1, 0)
        crossed = n * np.maximum(self.fam.kl(th, self.theta0), self.fam.kl(th, self.theta1)) >= self.a
        final = at & (state["look"] >= self.n_star)
        dec = np.where(at & (crossed | final), side, dec)
        go = at & (dec == CONTINUE)
        first = go & (state["stage"] == 1)
        if first.any():
            with np.errstate(over="ignore"):
                target = np.ceil((1 + self.eps) * self.n_of_theta(th))
            target = np.minimum(self.n_star, np.where(np.isfinite(target), target, self.n_star))
            immediate = first & (target <= n)
            dec = np.where(immediate, side, dec)
            state["stage"] = np.where(first, 2.0, state["stage"])
            state["look"] = np.where(first & ~immediate, target.astype(np.int64), state["look"])
        second = go & ~first
        state["stage"] = np.where(second, 3.0, state["stage"])
        state["look"] = np.where(second, self.n_star, state["look"])
        return dec

    def statistic(self, state):
        return state["stage"].copy()


def run_three_stage_composite(fam, theta0, theta1, alpha0, alpha1, stream, interval=None,
                              fraction=0.4, cap=DEFAULT_CAP) -> TestOutcome:
    proc = ThreeStageCompositeProcedure(fam, theta0, theta1, alpha0, alpha1, interval, fraction)
    return run_stream(proc, stream, cap)

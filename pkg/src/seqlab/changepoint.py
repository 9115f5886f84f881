"""Quickest-change detectors: CUSUM, Shiryaev-Roberts, GLR-CUSUM for an
exponential family, and the restart construction that turns a one-sided test
into a detector. Detectors are procedures whose only decision is 1 (alarm)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import (CONTINUE, DEFAULT_CAP, PathBatch, Procedure, TestOutcome, change_source,
                     run_paths, run_stream, step)
from .errors import PreconditionError
from .harness import Estimate, McConfig, mc_blocks, mean_estimate
from .model import Distribution, ExpFamily1D


class ReliabilityWarning(UserWarning):
    """Too many runs hit the observation cap for the estimate to be trusted."""


@dataclass(frozen=True)
class ChangeModel:
    """Observations follow ``pre`` up to and including X_nu, then ``post``.
    ``nu=None`` means no change."""

    pre: Distribution
    post: Distribution
    nu: Optional[int] = None

    def __post_init__(self):
        if self.nu is not None and self.nu < 0:
            raise PreconditionError("changepoint must be nonnegative")

    def llr(self, x):
        return self.post.logpdf(x) - self.pre.logpdf(x)

    def at(self, nu):
        return ChangeModel(self.pre, self.post, nu)

    def source(self):
        return change_source(self.pre, self.post, self.nu)


def cusum_update(W, Z):
    """One CUSUM step: max(W + Z, 0)."""
    if np.any(np.asarray(W) < 0):
        raise PreconditionError("CUSUM statistic must be nonnegative")
    return np.maximum(np.asarray(W) + Z, 0.0) if np.ndim(W) or np.ndim(Z) else max(W + Z, 0.0)


class CusumProcedure(Procedure):
    """Alarm at the first n with W_n >= a, W_n = max(W_{n-1} + Z_n, 0)."""

    def __init__(self, cm: ChangeModel, a: float, w0: float = 0.0):
        if a <= 0:
            raise PreconditionError("CUSUM threshold must be positive")
        if w0 < 0:
            raise PreconditionError("initial CUSUM value must be nonnegative")
        self.cm, self.a, self.w0 = cm, a, w0

    def init(self, m):
        return {"W": np.full(m, float(self.w0))}

    def advance(self, state, x):
        state["W"] = np.maximum(state["W"] + self.cm.llr(x), 0.0)
        return np.where(state["W"] >= self.a, 1, CONTINUE)

    def statistic(self, state):
        return state["W"].copy()


class ShiryaevRobertsProcedure(Procedure):
    """R_n = (1 + R_{n-1}) LR_n with R_0 = r; alarm at R_n >= A.

    R is kept on the linear scale; rows whose R exceeds 1e300 switch to log R.
    """

    BIG = 1e300

    def __init__(self, cm: ChangeModel, A: float, r: float = 0.0):
        if A <= 0:
            raise PreconditionError("SR threshold must be positive")
        if r < 0:
            raise PreconditionError("head start must be nonnegative")
        self.cm, self.A, self.r = cm, A, r

    def init(self, m):
        with np.errstate(divide="ignore"):
            return {"R": np.full(m, float(self.r)), "logR": np.full(m, math.log(self.r) if self.r else -np.inf),
                    "big": np.zeros(m, dtype=bool)}

    def advance(self, state, x):
        z = self.cm.llr(x)
        with np.errstate(over="ignore", invalid="ignore"):
            lin = (1.0 + state["R"]) * np.exp(z)
        log_next = np.logaddexp(0.0, state["logR"]) + z
        big = state["big"] | ~(lin < self.BIG)
        with np.errstate(divide="ignore"):
            state["logR"] = np.where(big, log_next, np.log(np.where(big, 1.0, lin)))
        state["R"] = np.where(big, np.inf, lin)
        state["big"] = big
        alarm = np.where(big, state["logR"] >= math.log(self.A), state["R"] >= self.A)
        return np.where(alarm, 1, CONTINUE)

    def statistic(self, state):
        return state["R"].copy()


class GlrCusumProcedure(Procedure):
    """GLR-CUSUM for f_theta against f_theta0 with alternatives |theta - theta0| >= theta1.

    For each candidate change time nu the statistic is
    sup (theta - theta0) S - k (b(theta) - b(theta0)) over the two one-sided
    ranges, with k = n - nu and S the sum of the last k observations; the sup on
    each side is attained at the MLE clamped to that side. Alarm when the max
    over candidates exceeds h strictly. ``window`` keeps only the most recent
    candidates; ``restart=False`` keeps only nu = 0, which is the one-sided GLR
    test.
    """

    def __init__(self, fam: ExpFamily1D, theta1: float, h: float, window: Optional[int] = None,
                 theta0: float = 0.0, restart: bool = True):
        theta1 = abs(theta1)
        lo, hi = fam.theta_space
        if h <= 0:
            raise PreconditionError("GLR threshold must be positive")
        if not (lo < theta0 - theta1 or theta0 + theta1 < hi) or theta1 == 0:
            raise PreconditionError("theta1 must leave an alternative inside the parameter space")
        if window is not None and window < 2:
            raise PreconditionError("window must be at least 2")
        self.fam, self.theta0, self.theta1, self.h = fam, theta0, theta1, h
        self.window, self.restart = window, restart
        self.b0 = float(fam.b(theta0))
        self.upper = (theta0 + theta1, hi) if theta0 + theta1 < hi else None
        self.lower = (lo, theta0 - theta1) if lo < theta0 - theta1 else None

    def init(self, m):
        return {"sums": np.zeros((m, 8 if self.restart else 1)), "glr": np.full(m, -np.inf)}

    def side_sup(self, s, k, side):
        lo, hi = side
        mean = s / k
        m_lo, m_hi = self.fam.bdot(lo), self.fam.bdot(hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            th = np.where(mean <= m_lo, lo, np.where(mean >= m_hi, hi,
                                                     self.fam.bdot_inv(np.clip(mean, m_lo, m_hi))))
        th = np.clip(th, lo, hi)
        return (th - self.theta0) * s - k * (self.fam.b(th) - self.b0)

    def candidate_values(self, sums, k):
        out = np.full(sums.shape, -np.inf)
        for side in (self.upper, self.lower):
            if side is not None:
                out = np.maximum(out, self.side_sup(sums, k, side))
        return out

    def advance(self, state, x):
        n = int(state["n"][0]) if len(state["n"]) else 1
        if not self.restart:
            c = 1
            state["sums"][:, 0] += x
        else:
            c = n if self.window is None else min(n, self.window)
            sums = state["sums"]
            if c > sums.shape[1]:
                grown = np.zeros((sums.shape[0], 2 * sums.shape[1]))
                grown[:, :sums.shape[1]] = sums
                sums = state["sums"] = grown
            # column j holds the sum of the last j + 1 observations
            sums[:, 1:c] = sums[:, :c - 1] + x[:, None]
            sums[:, 0] = x
        k = np.arange(1, c + 1) if self.restart else np.array([n])
        vals = self.candidate_values(state["sums"][:, :c], k[None, :])
        state["glr"] = vals.max(axis=1)
        return np.where(state["glr"] > self.h, 1, CONTINUE)

    def statistic(self, state):
        return state["glr"].copy()


def glr_false_alarm_bound(fam: ExpFamily1D, theta1: float, h: float, theta0: float = 0.0) -> float:
    """exp(-h) [1 + h / min(I(theta0 + theta1), I(theta0 - theta1))], an upper
    bound on the probability that the one-sided GLR test ever fires without a change."""
    t = abs(theta1)
    lo, hi = fam.theta_space
    infos = [fam.kl(theta0 + s * t, theta0) for s in (1, -1) if lo < theta0 + s * t < hi]
    return math.exp(-h) * (1 + h / min(infos))


class RepeatedTestProcedure(Procedure):
    """Detector built by starting a fresh copy of a one-sided test after every
    observation: alarm at min_k (tau_k + k), where tau_k is the test run on
    X_{k+1}, X_{k+2}, ... A copy that stops with decision 0 is discarded.

    State holds one row per live copy, with ``owner`` mapping copies to paths.
    """

    def __init__(self, base: Procedure):
        self.base = base

    def init(self, m):
        inner = self.base.initial_state(0)
        return {"owner": np.zeros(0, dtype=np.int64), "inner": inner, "best": np.full(m, np.nan)}

    def advance(self, state, x):
        m = len(state["n"])
        fresh = self.base.initial_state(m)
        inner = {k: np.concatenate([state["inner"][k], fresh[k]]) for k in fresh}
        owner = np.concatenate([state["owner"], np.arange(m)])
        dec = step(self.base, inner, x[owner])
        stat = self.base.statistic(inner)
        best = np.full(m, -np.inf)
        np.maximum.at(best, owner, np.where(np.isnan(stat), -np.inf, stat))
        state["best"] = best
        alarm = np.zeros(m, dtype=bool)
        alarm[owner[dec == 1]] = True
        live = dec == CONTINUE
        state["inner"] = self.base.keep(inner, live)
        state["owner"] = owner[live]
        return np.where(alarm, 1, CONTINUE)

    def keep(self, state, mask):
        remap = np.cumsum(mask) - 1
        rows = mask[state["owner"]]
        return {"n": state["n"][mask], "best": state["best"][mask],
                "inner": self.base.keep(state["inner"], rows), "owner": remap[state["owner"][rows]]}

    def statistic(self, state):
        return state["best"].copy()


class OneSidedSprt(Procedure):
    """Stop and reject the pre-change law when sum log f1/f0 reaches a."""

    def __init__(self, cm: ChangeModel, a: float):
        if a <= 0:
            raise PreconditionError("threshold must be positive")
        self.cm, self.a = cm, a

    def init(self, m):
        return {"llr": np.zeros(m)}

    def advance(self, state, x):
        state["llr"] = state["llr"] + self.cm.llr(x)
        return np.where(state["llr"] >= self.a, 1, CONTINUE)

    def statistic(self, state):
        return state["llr"].copy()


# ---------------------------------------------------------------------------
# Single-stream runners


def run_cusum(cm: ChangeModel, a: float, stream, cap: int = DEFAULT_CAP, record_path=False) -> TestOutcome:
    return run_stream(CusumProcedure(cm, a), stream, cap, record_path)


def run_sr(cm: ChangeModel, A: float, stream, r: float = 0.0, cap: int = DEFAULT_CAP,
           record_path=False) -> TestOutcome:
    return run_stream(ShiryaevRobertsProcedure(cm, A, r), stream, cap, record_path)


def run_glr_cusum(fam: ExpFamily1D, theta1: float, h: float, stream, window: Optional[int] = None,
                  cap: int = DEFAULT_CAP, theta0: float = 0.0, record_path=False) -> TestOutcome:
    return run_stream(GlrCusumProcedure(fam, theta1, h, window, theta0), stream, cap, record_path)


def run_glr_test(fam: ExpFamily1D, theta1: float, h: float, stream, cap: int = DEFAULT_CAP,
                 theta0: float = 0.0) -> TestOutcome:
    """One-sided GLR test: stops only if the change is declared."""
    return run_stream(GlrCusumProcedure(fam, theta1, h, theta0=theta0, restart=False), stream, cap)


def lorden_repeated(base: Procedure, stream, cap: int = DEFAULT_CAP) -> TestOutcome:
    return run_stream(RepeatedTestProcedure(base), stream, cap)


# ---------------------------------------------------------------------------
# Operating characteristics


@dataclass
class DetectionReport:
    """ARL to false alarm, conditional delays E_nu[T - nu | T > nu] per
    changepoint, and the worst-case delay estimate.

    ``esedd_method`` is "restart" when the worst case is obtained by starting
    the detector at its minimal state at the change (valid for CUSUM), and
    "grid-max" when it is only the largest delay over the changepoint grid.
    """

    arl: Estimate
    delays: dict
    esedd: Estimate
    esedd_method: str
    warnings: list = field(default_factory=list)

    def rows(self):
        out = [(nu, e.mean, e.se, e.capped_fraction) for nu, e in sorted(self.delays.items())]
        out.append(("inf", self.arl.mean, self.arl.se, self.arl.capped_fraction))
        return out


def _batch(builder, cm, cfg):
    proc = builder(cm)

    def sim(rng, m):
        return run_paths(proc, cm.source(), rng, m, cfg.cap)

    return PathBatch.concat(mc_blocks(sim, cfg))


def _capped_check(batch, label, sink):
    frac = float(np.mean(batch.truncated))
    if frac > 0.01:
        msg = f"{label}: {frac:.1%} of runs reached the cap; the estimate is a lower bound"
        warnings.warn(msg, ReliabilityWarning, stacklevel=3)
        sink.append(msg)
    return frac


def conditional_delay(batch: PathBatch, nu: int) -> Estimate:
    """E_nu[T - nu | T > nu]; runs alarming at or before nu are excluded."""
    after = batch.T > nu
    est = mean_estimate(batch.T[after] - nu, batch.truncated[after])
    return est


def detection_report(builder: Callable[[ChangeModel], Procedure], cm: ChangeModel, nus: Sequence[int],
                     cfg: McConfig, restart_worst_case: bool = False) -> DetectionReport:
    """Monte Carlo operating characteristics of a detector.

    ``builder(cm)`` returns the detector procedure. With ``restart_worst_case``
    the worst-case delay is estimated by runs with the change at 0 (the
    detector's initial state is its least favorable pre-change state, as for
    CUSUM started at 0); otherwise it is the maximum conditional delay on the grid.
    """
    if cfg.reps < 10_000:
        warnings.warn("fewer than 10^4 replications per changepoint", ReliabilityWarning, stacklevel=2)
    notes: list = []
    nus = sorted(set(int(v) for v in nus))
    free = _batch(builder, cm.at(None), cfg)
    frac = _capped_check(free, "no-change runs", notes)
    arl = mean_estimate(free.T, free.truncated)
    arl = Estimate(arl.mean, arl.se, arl.n_effective, frac)
    delays = {}
    for k, nu in enumerate(nus):
        sub = McConfig(cfg.reps, cfg.seed + 1 + k, cfg.cap, cfg.workers, cfg.block)
        b = _batch(builder, cm.at(nu), sub)
        _capped_check(b, f"changepoint {nu}", notes)
        delays[nu] = conditional_delay(b, nu)
    if restart_worst_case:
        esedd = delays[0] if 0 in delays else conditional_delay(_batch(builder, cm.at(0), cfg), 0)
        method = "restart"
    else:
        esedd = max(delays.values(), key=lambda e: e.mean)
        method = "grid-max"
    return DetectionReport(arl, delays, esedd, method, notes)


def arl_renewal(builder: Callable[[ChangeModel], Procedure], cm: ChangeModel, horizon: int,
                cfg: McConfig) -> Estimate:
    """ARL to false alarm from alarm counts over a fixed horizon with the
    detector restarted at its initial state after each alarm.

    Alarm times then form a renewal process, so horizon / (alarms per path)
    estimates the mean run length without any run being cut off by a cap; the
    bias from the unfinished last cycle is O(ARL / horizon).
    """
    proc = builder(cm.at(None))
    src = cm.at(None).source()
    if any(np.ndim(v) != 1 for v in proc.initial_state(1).values()):
        raise PreconditionError("renewal ARL needs a detector with one scalar state per path")

    def sim(rng, m):
        count = np.zeros(m)
        state = proc.initial_state(m)
        t = 0
        while t < horizon:
            k = min(1024, horizon - t)
            X = src(rng, m, t, k)
            for c in range(k):
                dec = step(proc, state, X[:, c])
                hit = dec == 1
                if hit.any():
                    count += hit
                    fresh = proc.initial_state(m)
                    for key in state:
                        state[key] = np.where(hit.reshape((-1,) + (1,) * (state[key].ndim - 1)),
                                              fresh[key], state[key])
            t += k
        return count

    counts = np.concatenate(mc_blocks(sim, cfg))
    rate = counts.mean() / horizon
    if rate == 0:
        return Estimate(math.inf, math.inf, len(counts), 1.0)
    se_rate = counts.std(ddof=1) / math.sqrt(len(counts)) / horizon
    return Estimate(1.0 / rate, se_rate / rate ** 2, len(counts), 0.0)

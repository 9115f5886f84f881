"""Composite hypotheses theta <= theta0 vs theta >= theta1 in a one-parameter
exponential family: Schwarz's test, the Kiefer-Sacks posterior-risk rule (with
an overshoot-adaptive variant), Lorden's weighted GSLRT and the asymptotic
error approximations used to set its threshold."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from ._numeric import bisect
from .engine import CONTINUE, DEFAULT_CAP, Procedure, TestOutcome, run_stream
from .errors import NumericError, PreconditionError
from .model import ExpFamily1D, mle_clamped


@dataclass(frozen=True)
class CompositeProblem:
    """H0: theta in [theta_lo, theta0] vs H1: theta in [theta1, theta_hi].

    ``prior`` is a density on [theta_lo, theta_hi] (uniform by default) and
    ``loss`` a wrong-decision loss, zero inside the indifference zone (default 1
    outside it). ``c`` is the cost per observation.
    """

    fam: ExpFamily1D
    theta_lo: float
    theta0: float
    theta1: float
    theta_hi: float
    c: float = 1e-3
    prior: Optional[Callable] = None
    loss: Optional[Callable] = None

    def __post_init__(self):
        if not self.theta_lo < self.theta0 < self.theta1 < self.theta_hi:
            raise PreconditionError("need theta_lo < theta0 < theta1 < theta_hi")
        lo, hi = self.fam.theta_space
        if self.theta_lo < lo or self.theta_hi > hi:
            raise PreconditionError("parameter interval exceeds the family's parameter space")
        if not 0 < self.c < 1:
            raise PreconditionError("cost per observation must lie in (0, 1)")

    def w(self, theta):
        if self.prior is None:
            return np.full(np.shape(theta), 1.0 / (self.theta_hi - self.theta_lo))
        return np.asarray(self.prior(theta), dtype=float)

    def L(self, theta):
        if self.loss is None:
            t = np.asarray(theta, dtype=float)
            return np.where((t > self.theta0) & (t < self.theta1), 0.0, 1.0)
        return np.asarray(self.loss(theta), dtype=float)

    @property
    def interval(self):
        return (self.theta_lo, self.theta_hi)

    @property
    def theta_star(self) -> float:
        """Root of I(theta, theta0) = I(theta, theta1), i.e. b'(theta*) equals
        the chord slope (b(theta1) - b(theta0)) / (theta1 - theta0)."""
        fam = self.fam
        return bisect(lambda t: fam.kl(t, self.theta0) - fam.kl(t, self.theta1),
                      self.theta0, self.theta1, xtol=0.0, max_iter=400)

    def mle(self, s, n):
        return mle_clamped(self.fam, s, n, self.interval, method="closed")

    def llr(self, theta, i, s, n):
        """lambda_n(theta, theta_i) from the sufficient statistic."""
        return self.fam.llr(theta, self.theta0 if i == 0 else self.theta1, s, n)


# ---------------------------------------------------------------------------
# Posterior stopping risk


def posterior_stop_risk(prob: CompositeProblem, s_n: float, n: int, epsabs: float = 1e-10):
    """Posterior risk of stopping now: min_i int_{Theta_i} L w e^{theta S - n b}
    / int w e^{theta S - n b}. Returns (risk, decision), where the decision
    avoids the region carrying the smaller posterior loss."""
    fam = prob.fam
    peak = float(prob.mle(s_n, n))

    def integral(a, b, weight):
        # scale by the largest exponent on [a, b] so tiny side masses keep their relative accuracy
        m = min(max(peak, a), b)
        top = m * s_n - n * float(fam.b(m))

        def f(t):
            v = math.exp(t * s_n - n * float(fam.b(t)) - top) * float(prob.w(t))
            return v * float(prob.L(t)) if weight else v

        pts = [peak] if a < peak < b else None
        val, _ = integrate.quad(f, a, b, points=pts, epsabs=epsabs, epsrel=1e-10, limit=200)
        return math.log(val) + top if val > 0 else -math.inf

    lo_num = integral(prob.theta_lo, prob.theta0, True)
    hi_num = integral(prob.theta1, prob.theta_hi, True)
    denom = np.logaddexp.reduce([integral(prob.theta_lo, prob.theta0, False),
                                 integral(prob.theta0, prob.theta1, False),
                                 integral(prob.theta1, prob.theta_hi, False)])
    if not np.isfinite(denom):
        raise NumericError(f"posterior normalizer vanished at S={s_n}, n={n}")
    if lo_num <= hi_num:
        return math.exp(lo_num - denom), 1
    return math.exp(hi_num - denom), 0


def laplace_posterior_approx(prob: CompositeProblem, s_n: float, n: int):
    """Laplace approximation of the stopping risk,
    min_i w(theta_i) L(theta_i) sqrt(b''(th)/(2 pi n)) e^{-lambda_n(th, theta_i)}
    / (w(th) |b'(theta_i) - b'(th)|), with th the MLE.

    The minimizing term is the one for the hypothesis not accepted: accept H0
    (d=0) when th <= theta* and evaluate at theta1, and vice versa.
    Returns (risk, decision).
    """
    fam = prob.fam
    th = float(prob.mle(s_n, n))
    gap = 0.05 * (prob.theta_hi - prob.theta_lo)
    for edge in (prob.theta_lo, prob.theta0, prob.theta1, prob.theta_hi):
        if abs(th - edge) < gap:
            raise PreconditionError(f"MLE {th:.4g} too close to {edge:.4g} for the Laplace approximation")
    terms = []
    for i, ti in ((0, prob.theta0), (1, prob.theta1)):
        lam = prob.llr(th, i, s_n, n)
        terms.append(float(prob.w(ti) * prob.L(ti)) * math.sqrt(float(fam.bddot(th)) / (2 * math.pi * n))
                     * math.exp(-lam) / (float(prob.w(th)) * abs(float(fam.bdot(ti) - fam.bdot(th)))))
    d = 0 if th <= prob.theta_star else 1
    return min(terms), d


# ---------------------------------------------------------------------------
# Overshoot tables


@dataclass(frozen=True)
class OvershootTable:
    """L(theta, theta1) on [theta_lo, theta*] and L(theta, theta0) on
    [theta*, theta_hi], tabulated on ``points`` nodes and linearly interpolated."""

    prob: CompositeProblem
    grid_lo: np.ndarray
    l_lo: np.ndarray
    grid_hi: np.ndarray
    l_hi: np.ndarray

    @classmethod
    def build(cls, prob: CompositeProblem, points: int = 64, tol: float = 1e-6):
        from .renewal import l_number_family

        ts = prob.theta_star
        glo = np.linspace(prob.theta_lo, ts, points)
        ghi = np.linspace(ts, prob.theta_hi, points)
        llo = np.array([l_number_family(prob.fam, t, prob.theta1, tol) for t in glo])
        lhi = np.array([l_number_family(prob.fam, t, prob.theta0, tol) for t in ghi])
        return cls(prob, glo, llo, ghi, lhi)

    @classmethod
    def constant(cls, prob: CompositeProblem, value: float = 1.0):
        ts = prob.theta_star
        g = np.array([prob.theta_lo, ts]), np.array([ts, prob.theta_hi])
        return cls(prob, g[0], np.full(2, value), g[1], np.full(2, value))

    def lnum(self, theta):
        """L-number relevant at the estimate: against theta1 below theta*,
        against theta0 otherwise."""
        t = np.asarray(theta, dtype=float)
        ts = self.grid_hi[0]
        return np.where(t < ts, np.interp(t, self.grid_lo, self.l_lo), np.interp(t, self.grid_hi, self.l_hi))

    def zeta(self, theta, i):
        """zeta(theta, theta_i) = L(theta, theta_i) / I(theta, theta_i)."""
        t = np.asarray(theta, dtype=float)
        p = self.prob
        if i == 0:
            return np.interp(t, self.grid_hi, self.l_hi) / p.fam.kl(t, p.theta0)
        return np.interp(t, self.grid_lo, self.l_lo) / p.fam.kl(t, p.theta1)


# ---------------------------------------------------------------------------
# Kiefer-Sacks


class KieferSacksProcedure(Procedure):
    """Stop when the posterior stopping risk is at most Q c, or at most
    c / L(theta_hat) in the overshoot-adaptive mode."""

    def __init__(self, prob: CompositeProblem, Q: float = 1.0, table: Optional[OvershootTable] = None):
        if Q <= 0:
            raise PreconditionError("Q must be positive")
        self.prob, self.Q, self.table = prob, Q, table
        self._cache = {} if prob.fam.integer_valued else None

    def risk(self, s, n):
        if self._cache is None:
            return posterior_stop_risk(self.prob, s, n)
        key = (int(round(s)), int(n))
        if key not in self._cache:
            self._cache[key] = posterior_stop_risk(self.prob, s, n)
        return self._cache[key]

    def init(self, m):
        return {"s": np.zeros(m)}

    def advance(self, state, x):
        state["s"] = state["s"] + x
        s, n = state["s"], state["n"]
        R = np.empty(len(s))
        d = np.empty(len(s), dtype=np.int64)
        for k in range(len(s)):
            R[k], d[k] = self.risk(s[k], n[k])
        if self.table is None:
            limit = self.Q * self.prob.c
        else:
            limit = self.prob.c / self.table.lnum(self.prob.mle(s, n))
        return np.where(R <= limit, d, CONTINUE)

    def statistic(self, state):
        return np.asarray(self.prob.mle(state["s"], state["n"]), dtype=float)

    def truncation_decision(self, state):
        return (self.statistic(state) >= self.prob.theta_star).astype(np.int64)


def run_kiefer_sacks(prob: CompositeProblem, stream, Q: float = 1.0, adaptive: bool = False,
                     table: Optional[OvershootTable] = None, cap: int = DEFAULT_CAP) -> TestOutcome:
    if adaptive and table is None:
        table = OvershootTable.build(prob)
    return run_stream(KieferSacksProcedure(prob, Q, table if adaptive else None), stream, cap)


# ---------------------------------------------------------------------------
# Schwarz


class SchwarzProcedure(Procedure):
    """Schwarz's test with threshold |log c|.

    ``form="information"``: stop when n max_i I(th, theta_i) >= |log c|.
    ``form="sup"``: stop when max_i lambda_n(th, theta_i) >= |log c|.
    The two coincide whenever the MLE is interior. d = 0 iff th < theta*.
    """

    def __init__(self, prob: CompositeProblem, form: str = "information"):
        if form not in ("information", "sup"):
            raise PreconditionError("form must be 'information' or 'sup'")
        self.prob, self.form = prob, form
        self.a = abs(math.log(prob.c))
        self.ts = prob.theta_star

    def init(self, m):
        return {"s": np.zeros(m)}

    def advance(self, state, x):
        state["s"] = state["s"] + x
        p = self.prob
        s, n = state["s"], state["n"]
        th = p.mle(s, n)
        if self.form == "information":
            stat = n * np.maximum(p.fam.kl(th, p.theta0), p.fam.kl(th, p.theta1))
            d = np.where(th < self.ts, 0, 1)
        else:
            l0, l1 = p.llr(th, 0, s, n), p.llr(th, 1, s, n)
            stat = np.maximum(l0, l1)
            d = np.where(l0 >= l1, 1, 0)
        return np.where(stat >= self.a, d, CONTINUE)

    def statistic(self, state):
        return np.asarray(self.prob.mle(state["s"], state["n"]), dtype=float)

    def truncation_decision(self, state):
        return (self.statistic(state) >= self.ts).astype(np.int64)


def run_schwarz(prob: CompositeProblem, stream, cap: int = DEFAULT_CAP, form: str = "information"):
    return run_stream(SchwarzProcedure(prob, form), stream, cap)


# ---------------------------------------------------------------------------
# Lorden's GSLRT


def lorden_h(prob: CompositeProblem, theta, i: int, zeta):
    """Boundary weight h_i(theta) = sqrt(2 pi / (I^3 b''(theta)))
    w(theta) |b'(theta) - b'(theta_i)| / (w(theta_i) L(theta_i) zeta)."""
    fam = prob.fam
    ti = prob.theta0 if i == 0 else prob.theta1
    t = np.asarray(theta, dtype=float)
    I = fam.kl(t, ti)
    if np.any(I <= 0):
        raise PreconditionError("h_i is singular at theta = theta_i")
    return (np.sqrt(2 * np.pi / (I ** 3 * fam.bddot(t))) * prob.w(t) * np.abs(fam.bdot(t) - fam.bdot(ti))
            / (prob.w(ti) * prob.L(ti) * zeta))


@dataclass(frozen=True)
class AdaptiveBoundary:
    """Stop on side i when lambda_n(th, theta_i) >= base_a - log h_i(th);
    h0 is used for th >= theta*, h1 for th <= theta*."""

    base_a: float
    h0: Callable
    h1: Callable

    @classmethod
    def flat(cls, a: float):
        one = lambda t: np.ones(np.shape(t))
        return cls(a, one, one)

    @classmethod
    def lorden(cls, prob: CompositeProblem, table: OvershootTable, a: Optional[float] = None):
        if a is None:
            a = default_threshold(prob.c)
        return cls(a, lambda t: lorden_h(prob, t, 0, table.zeta(t, 0)),
                   lambda t: lorden_h(prob, t, 1, table.zeta(t, 1)))


def default_threshold(c: float) -> float:
    """|log c| - (1/2) log |log c|."""
    A = abs(math.log(c))
    return A - 0.5 * math.log(A)


class LordenGslrtProcedure(Procedure):
    """Lorden's GSLRT.

    ``form="curved"`` compares the closed-form LLR with the curved boundary
    a - log h_i(th). ``form="weighted"`` re-sums the per-observation log density
    ratios at the current MLE from the stored data and adds log h_i(th). Stopping
    on side 0 rejects H0 (d=1); side 1 gives d=0.
    """

    def __init__(self, prob: CompositeProblem, boundary: AdaptiveBoundary, form: str = "curved"):
        if form not in ("curved", "weighted"):
            raise PreconditionError("form must be 'curved' or 'weighted'")
        self.prob, self.boundary, self.form = prob, boundary, form
        self.ts = prob.theta_star

    def init(self, m):
        st = {"s": np.zeros(m)}
        if self.form == "weighted":
            st["x"] = np.zeros((m, 0))
        return st

    def _llr(self, state, th, i):
        p = self.prob
        if self.form == "curved":
            return p.llr(th, i, state["s"], state["n"])
        ti = p.theta0 if i == 0 else p.theta1
        X = state["x"]
        return np.sum(p.fam.logpdf(th[:, None], X) - p.fam.logpdf(ti, X), axis=1)

    def advance(self, state, x):
        state["s"] = state["s"] + x
        if self.form == "weighted":
            state["x"] = np.concatenate([state["x"], np.asarray(x, float)[:, None]], axis=1)
        th = np.atleast_1d(np.asarray(self.prob.mle(state["s"], state["n"]), dtype=float))
        b = self.boundary
        up = np.where(th >= self.ts, th, self.ts)
        down = np.where(th <= self.ts, th, self.ts)
        if self.form == "curved":
            e0 = self._llr(state, th, 0) - (b.base_a - np.log(b.h0(up)))
            e1 = self._llr(state, th, 1) - (b.base_a - np.log(b.h1(down)))
        else:
            e0 = self._llr(state, th, 0) + np.log(b.h0(up)) - b.base_a
            e1 = self._llr(state, th, 1) + np.log(b.h1(down)) - b.base_a
        hit0 = (th >= self.ts) & (e0 >= 0)
        hit1 = (th <= self.ts) & (e1 >= 0)
        d = np.where(hit0, 1, np.where(hit1, 0, CONTINUE))
        return np.where(hit0 & hit1, np.where(e0 > e1, 1, 0), d)

    def statistic(self, state):
        return np.asarray(self.prob.mle(state["s"], state["n"]), dtype=float)

    def truncation_decision(self, state):
        return (self.statistic(state) >= self.ts).astype(np.int64)


def run_lorden_gslrt(prob: CompositeProblem, boundary: AdaptiveBoundary, stream,
                     cap: int = DEFAULT_CAP, form: str = "curved") -> TestOutcome:
    return run_stream(LordenGslrtProcedure(prob, boundary, form), stream, cap)


@dataclass(frozen=True)
class GslrtErrorApprox:
    alpha0: float
    alpha1: float
    C0: float
    C1: float


def error_constants(prob: CompositeProblem, boundary: AdaptiveBoundary, table: OvershootTable):
    """C_i = int zeta(theta, theta_i) h_i(theta) sqrt(b''(theta) / (2 pi I(theta, theta_i))) dtheta
    over [theta*, theta_hi] for i=0 and [theta_lo, theta*] for i=1."""
    fam, ts = prob.fam, prob.theta_star

    def integrand(t, i):
        ti = prob.theta0 if i == 0 else prob.theta1
        h = boundary.h0(t) if i == 0 else boundary.h1(t)
        return float(table.zeta(t, i) * h * np.sqrt(fam.bddot(t) / (2 * np.pi * fam.kl(t, ti))))

    C0, _ = integrate.quad(integrand, ts, prob.theta_hi, args=(0,), limit=200, epsrel=1e-9)
    C1, _ = integrate.quad(integrand, prob.theta_lo, ts, args=(1,), limit=200, epsrel=1e-9)
    return C0, C1


def error_prob_gslrt(prob: CompositeProblem, boundary: AdaptiveBoundary,
                     table: OvershootTable) -> GslrtErrorApprox:
    """alpha_i ~ sqrt(a) e^{-a} C_i with a the boundary's base threshold."""
    C0, C1 = error_constants(prob, boundary, table)
    a = boundary.base_a
    k = math.sqrt(a) * math.exp(-a)
    return GslrtErrorApprox(k * C0, k * C1, C0, C1)


def solve_threshold(C: float, alpha: float) -> float:
    """Solve a - (1/2) log a = log(C / alpha) for a > 1/2."""
    if C <= 0 or not 0 < alpha < 1:
        raise PreconditionError("need C > 0 and 0 < alpha < 1")
    rhs = math.log(C / alpha)
    if rhs <= 0.5:
        raise PreconditionError(f"log(C/alpha) = {rhs:.4g} must exceed 1/2")
    return bisect(lambda a: a - 0.5 * math.log(a) - rhs, 0.5, 1e3, xtol=1e-12)

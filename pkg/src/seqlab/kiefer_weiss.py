"""2-SPRT and modified MSPRT: one-sided tests run against an intermediate
measure G, with the triangular-boundary geometry for exponential families and
the least-favorable parameter used to tune them."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri

from ._numeric import bisect
from .engine import CONTINUE, DEFAULT_CAP, Procedure, TestOutcome, run_stream
from .errors import PreconditionError
from .model import Distribution, ExpFamily1D, SimpleModel
from .msprt import ThresholdMatrix


class ModifiedMsprtProcedure(Procedure):
    """lambda_j(n) = sum log g/f_j. Accept i at the first n where
    lambda_j(n) >= a_ji for all j != i; simultaneous acceptances go to the
    largest margin min_j(lambda_j - a_ji), ties to the lowest index."""

    def __init__(self, g: Distribution, model: SimpleModel, thr: ThresholdMatrix):
        if thr.size != len(model):
            raise PreconditionError("threshold matrix size must match the number of hypotheses")
        self.g, self.model, self.thr = g, model, thr
        k = thr.size
        off = ~np.eye(k, dtype=bool)
        self._aT = np.where(off, thr.a.T, -np.inf)  # aT[i, j] = a_ji

    def init(self, m):
        return {"lam": np.zeros((m, self.thr.size))}

    def margins(self, state):
        lam = state["lam"]
        # margin[:, i] = min_{j != i} (lambda_j - a_ji)
        return np.min(lam[:, None, :] - self._aT[None, :, :], axis=2)

    def advance(self, state, x):
        gx = self.g.logpdf(x)
        state["lam"] = state["lam"] + (gx[:, None] - self.model.logpdf_matrix(x))
        mg = self.margins(state)
        hit = (mg >= 0).any(axis=1)
        return np.where(hit, mg.argmax(axis=1), CONTINUE)

    def statistic(self, state):
        return self.margins(state).max(axis=1)

    def truncation_decision(self, state):
        return self.margins(state).argmax(axis=1)


def two_sprt_thresholds(a0: float, a1: float) -> ThresholdMatrix:
    """Threshold matrix of the 2-SPRT: a0 on log g/f0 (rejects H0), a1 on log g/f1."""
    return ThresholdMatrix(np.array([[0.0, a0], [a1, 0.0]]))


def run_2sprt(g: Distribution, f0: Distribution, f1: Distribution, a0: float, a1: float, stream,
              cap: int = DEFAULT_CAP, record_path: bool = False) -> TestOutcome:
    """2-SPRT: d=0 when log g/f1 reaches a1, d=1 when log g/f0 reaches a0."""
    if a0 <= 0 or a1 <= 0:
        raise PreconditionError("2-SPRT thresholds must be positive")
    proc = ModifiedMsprtProcedure(g, SimpleModel((f0, f1)), two_sprt_thresholds(a0, a1))
    return run_stream(proc, stream, cap, record_path)


def run_modified_msprt(g: Distribution, model: SimpleModel, thr: ThresholdMatrix, stream,
                       cap: int = DEFAULT_CAP) -> TestOutcome:
    return run_stream(ModifiedMsprtProcedure(g, model, thr), stream, cap)


def modified_msprt_error_bound(thr: ThresholdMatrix, p_accept_under_g) -> np.ndarray:
    """alpha_ij <= exp(-a_ij) G(d = j); ``p_accept_under_g[j]`` is G(d = j)."""
    a = thr.a
    bound = np.exp(-a) * np.asarray(p_accept_under_g, float)[None, :]
    np.fill_diagonal(bound, np.nan)
    return bound


# ---------------------------------------------------------------------------
# Exponential-family geometry


def _gamma(fam, theta, theta_i):
    return (theta - theta_i) / fam.kl(theta, theta_i)


@dataclass(frozen=True)
class TriangleDesign:
    """2-SPRT for an exponential family with G = f_theta, theta0 < theta < theta1,
    written as boundaries for S_n^theta = S_n - b'(theta) n."""

    fam: ExpFamily1D
    theta: float
    theta0: float
    theta1: float
    alpha0: float
    alpha1: float

    def __post_init__(self):
        if not self.theta0 < self.theta < self.theta1:
            raise PreconditionError("triangle needs theta0 < theta < theta1")
        if not (0 < self.alpha0 < 1 and 0 < self.alpha1 < 1):
            raise PreconditionError("error rates must lie in (0, 1)")

    @property
    def a0(self):
        return abs(math.log(self.alpha0))

    @property
    def a1(self):
        return abs(math.log(self.alpha1))

    def h1(self, n):
        """Upper boundary; crossing it rejects H0."""
        I0 = self.fam.kl(self.theta, self.theta0)
        return (self.a0 - I0 * np.asarray(n, float)) / (self.theta - self.theta0)

    def h0(self, n):
        """Lower boundary; crossing it accepts H0."""
        I1 = self.fam.kl(self.theta, self.theta1)
        return (-self.a1 + I1 * np.asarray(n, float)) / (self.theta1 - self.theta)

    @property
    def n_star(self):
        """Apex of the triangle, where the two boundaries meet."""
        return n_star(self.fam, self.theta, self.theta0, self.theta1, self.alpha0, self.alpha1)

    def model(self):
        return (self.fam.distribution(self.theta), self.fam.distribution(self.theta0),
                self.fam.distribution(self.theta1))


def n_star(fam, theta, theta0, theta1, alpha0, alpha1):
    g0 = _gamma(fam, theta, theta0)
    g1 = abs(_gamma(fam, theta, theta1))
    A0, A1 = abs(math.log(alpha0)), abs(math.log(alpha1))
    return float((g0 / fam.kl(theta, theta1) * A1 + g1 / fam.kl(theta, theta0) * A0) / (g0 + g1))


class TriangleProcedure(Procedure):
    """The 2-SPRT evaluated through the triangular boundaries."""

    def __init__(self, design: TriangleDesign):
        self.design = design
        self.mean = float(design.fam.bdot(design.theta))

    def init(self, m):
        return {"s": np.zeros(m)}

    def advance(self, state, x):
        state["s"] = state["s"] + x
        dsg = self.design
        n = state["n"]
        s_theta = state["s"] - self.mean * n
        up = (dsg.theta - dsg.theta0) * (s_theta - dsg.h1(n))
        down = (dsg.theta1 - dsg.theta) * (dsg.h0(n) - s_theta)
        hit1, hit0 = up >= 0, down >= 0
        both = hit1 & hit0
        d = np.where(hit1, 1, np.where(hit0, 0, CONTINUE))
        return np.where(both, np.where(up > down, 1, 0), d)

    def statistic(self, state):
        return state["s"] - self.mean * state["n"]


def theta_star(fam: ExpFamily1D, theta0: float, theta1: float, alpha0: float, alpha1: float):
    """Root of |log alpha0| / I(theta, theta0) = |log alpha1| / I(theta, theta1)
    on (theta0, theta1), where the two first-order stopping times of the 2-SPRT
    tuned to theta balance. Returns (theta*, n*(theta*))."""
    if not theta0 < theta1:
        raise PreconditionError("need theta0 < theta1")
    A0, A1 = abs(math.log(alpha0)), abs(math.log(alpha1))

    def f(t):
        return A0 / fam.kl(t, theta0) - A1 / fam.kl(t, theta1)

    eps = 1e-9 * (theta1 - theta0)
    root = bisect(f, theta0 + eps, theta1 - eps, xtol=0.0, max_iter=400)
    return float(root), float(A0 / fam.kl(root, theta0))


@dataclass(frozen=True)
class MinimaxTuning:
    theta_first_order: float
    r_star: float
    theta_second_order: float
    sigma: float
    n_star: float


def huffman_tuning(fam: ExpFamily1D, theta0: float, theta1: float, alpha0: float,
                   alpha1: float) -> MinimaxTuning:
    """Second-order correction theta* + r*/(sigma sqrt(n*)) with
    Phi(r*) = |gamma1| / (|gamma1| + gamma0) at theta*."""
    ts, ns = theta_star(fam, theta0, theta1, alpha0, alpha1)
    g0 = _gamma(fam, ts, theta0)
    g1 = abs(_gamma(fam, ts, theta1))
    r = float(ndtri(g1 / (g1 + g0)))
    sigma = math.sqrt(float(fam.bddot(ts)))
    return MinimaxTuning(ts, r, ts + r / (sigma * math.sqrt(ns)), sigma, ns)


def error_prob_2sprt_asymptotic(fam: ExpFamily1D, theta: float, theta0: float, theta1: float,
                                a0: float, a1: float, zeta0: Optional[float] = None,
                                zeta1: Optional[float] = None):
    """Approximate (alpha0, alpha1) of the 2-SPRT with G = f_theta.

    alpha0 ~ |g1|/(|g1|+g0) zeta0 e^{-a0}, alpha1 ~ g0/(|g1|+g0) zeta1 e^{-a1},
    with zeta_i = L(theta, theta_i) / I(theta, theta_i).
    """
    from .renewal import zeta_family

    if not theta0 < theta < theta1:
        raise PreconditionError("need theta0 < theta < theta1")
    z0 = zeta_family(fam, theta, theta0) if zeta0 is None else zeta0
    z1 = zeta_family(fam, theta, theta1) if zeta1 is None else zeta1
    g0 = _gamma(fam, theta, theta0)
    g1 = abs(_gamma(fam, theta, theta1))
    return (g1 / (g1 + g0) * z0 * math.exp(-a0), g0 / (g1 + g0) * z1 * math.exp(-a1))

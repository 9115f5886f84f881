"""Matrix SPRT for several simple hypotheses, its threshold designs, and the
weighted GSLRT for detecting signals in an unknown subset of streams."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import CONTINUE, DEFAULT_CAP, Procedure, TestOutcome, run_stream
from .errors import CapacityError, PreconditionError
from .model import SimpleModel, kl

MAX_SUBSETS = 2 ** 20


@dataclass(frozen=True)
class ThresholdMatrix:
    """``a[j, i]`` is the threshold that lambda_ij must reach for i to be accepted
    over j. Diagonal entries are ignored. Infinite entries are allowed: +inf
    makes a hypothesis unacceptable, -inf removes a constraint."""

    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
            raise PreconditionError("threshold matrix must be square with at least 2 rows")
        if np.isnan(a).any():
            raise PreconditionError("threshold matrix contains NaN")
        off = ~np.eye(len(a), dtype=bool)
        finite = np.isfinite(a) & off
        if np.any(a[finite] <= 0):
            raise PreconditionError("finite off-diagonal thresholds must be positive")
        np.fill_diagonal(a, 0.0)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def size(self):
        return len(self.a)


class MsprtProcedure(Procedure):
    """Accept i at the first n with lambda_ij(n) >= a_ji for every j != i.

    Each step evaluates both the pairwise form and the equivalent accepting-time
    form lambda_i0 >= max_j (lambda_j0 + a_ji) and checks they agree.
    """

    def __init__(self, model: SimpleModel, thr: ThresholdMatrix):
        if thr.size != len(model):
            raise PreconditionError("threshold matrix size must match the number of hypotheses")
        self.model, self.thr = model, thr
        self._aT = thr.a.T.copy()  # aT[i, j] = a_ji
        self._off = ~np.eye(thr.size, dtype=bool)

    def init(self, m):
        return {"ell": np.zeros((m, self.thr.size))}

    def advance(self, state, x):
        L = self.model.logpdf_matrix(x)
        state["ell"] = state["ell"] + (L - L[:, :1])
        ell = state["ell"]  # ell[:, k] = lambda_k0(n)
        lam = ell[:, :, None] - ell[:, None, :]  # lam[:, i, j] = lambda_ij(n)
        direct = np.all((lam >= self._aT) | ~self._off, axis=2)
        reach = np.where(self._off, ell[:, None, :] + self._aT, -np.inf)
        accept_time = ell >= reach.max(axis=2)
        if not np.array_equal(direct, accept_time):
            raise AssertionError("pairwise and accepting-time MSPRT forms disagree")
        if np.any(direct.sum(axis=1) > 1):
            raise AssertionError("more than one hypothesis accepted at the same time")
        return np.where(direct.any(axis=1), direct.argmax(axis=1), CONTINUE)

    def statistic(self, state):
        ell = state["ell"]
        if ell.shape[1] == 2:
            return ell[:, 1]
        return ell.max(axis=1)

    def truncation_decision(self, state):
        return state["ell"].argmax(axis=1)


def run_msprt(model: SimpleModel, thr: ThresholdMatrix, stream, cap: int = DEFAULT_CAP,
              record_path: bool = False) -> TestOutcome:
    """Run the matrix SPRT. At the cap the run is truncated and decided by the
    largest likelihood."""
    return run_stream(MsprtProcedure(model, thr), stream, cap, record_path)


def _alpha_matrix(alpha, size=None):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 0:
        if size is None:
            raise PreconditionError("a scalar error rate needs the number of hypotheses")
        alpha = np.full((size, size), float(alpha))
    off = ~np.eye(len(alpha), dtype=bool)
    if np.any((alpha[off] <= 0) | (alpha[off] >= 1)):
        raise PreconditionError("error rates must lie in (0, 1)")
    return alpha, off


def thresholds_first_order(alpha, size: Optional[int] = None) -> ThresholdMatrix:
    """a_ji = |log alpha_ji|; ``alpha[j, i]`` bounds P_j(accept i)."""
    alpha, off = _alpha_matrix(alpha, size)
    a = np.zeros_like(alpha)
    a[off] = np.abs(np.log(alpha[off]))
    return ThresholdMatrix(a)


def thresholds_bayes(prior: Sequence[float], loss, lnums, c: float) -> ThresholdMatrix:
    """a_ji = log[(pi_j / pi_i) L_ji Lnum_ij / c].

    ``loss[j, i]`` is the loss of accepting i when j is true, ``lnums[i, j]`` the
    L-number of the pair.
    """
    prior = np.asarray(prior, dtype=float)
    loss, lnums = np.asarray(loss, dtype=float), np.asarray(lnums, dtype=float)
    if np.any(prior <= 0) or abs(prior.sum() - 1) > 1e-12:
        raise PreconditionError("prior must be positive and sum to 1")
    if c <= 0:
        raise PreconditionError("cost per observation must be positive")
    k = len(prior)
    a = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                A = prior[j] / prior[i] * loss[j, i] * lnums[i, j] / c
                if A <= 1:
                    raise PreconditionError(f"threshold A_{j}{i} = {A:g} <= 1; cost c too large")
                a[j, i] = math.log(A)
    return ThresholdMatrix(a)


def thresholds_corrected(alpha, lnums, info, size: Optional[int] = None) -> ThresholdMatrix:
    """Overshoot-corrected design a_ji = log(zeta_ij / alpha_ji), zeta_ij = L_ij / I_ij.

    P_j(accept i) is approximately zeta_ij exp(-a_ji), so this targets alpha_ji
    itself rather than the upper bound exp(-a_ji).
    """
    alpha, off = _alpha_matrix(alpha, size)
    lnums, info = np.asarray(lnums, float), np.asarray(info, float)
    a = np.zeros_like(alpha)
    for j, i in zip(*np.nonzero(off)):
        a[j, i] = math.log(lnums[i, j] / info[i, j] / alpha[j, i])
    return ThresholdMatrix(a)


def ess_first_order(model: SimpleModel, alpha, size: Optional[int] = None) -> np.ndarray:
    """E_i[T] ~ max_j |log alpha_ji| / I_ij as the error rates go to zero."""
    alpha, _ = _alpha_matrix(alpha, size or len(model))
    k = len(model)
    return np.array([max(abs(math.log(alpha[j, i])) / kl(model, i, j) for j in range(k) if j != i)
                     for i in range(k)])


def info_matrix(model: SimpleModel) -> np.ndarray:
    k = len(model)
    return np.array([[kl(model, i, j) for j in range(k)] for i in range(k)])


def lnumber_matrix(model: SimpleModel, tol: float = 1e-6) -> np.ndarray:
    from .renewal import l_number

    k = len(model)
    out = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = l_number(model, i, j, tol).value
    return out


# ---------------------------------------------------------------------------
# Multistream weighted GSLRT


@dataclass(frozen=True)
class StreamsSpec:
    """Independent streams; stream k has null density ``streams[k][0]`` and
    signal density ``streams[k][1]``. ``subsets`` are bitmasks of streams that
    may carry signal and ``weights`` their prior weights (summing to 1)."""

    streams: tuple
    subsets: tuple
    weights: np.ndarray

    def __post_init__(self):
        n = len(self.streams)
        subs = tuple(int(s) for s in self.subsets)
        if len(subs) > MAX_SUBSETS:
            raise CapacityError(f"{len(subs)} subsets exceed the enumeration limit {MAX_SUBSETS}")
        if not subs or any(s <= 0 or s >= 1 << n for s in subs) or len(set(subs)) != len(subs):
            raise PreconditionError("subsets must be distinct nonempty bitmasks over the streams")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(subs),) or np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise PreconditionError("subset weights must be positive and sum to 1")
        object.__setattr__(self, "streams", tuple(self.streams))
        object.__setattr__(self, "subsets", subs)
        object.__setattr__(self, "weights", w)

    @classmethod
    def k_bounded(cls, streams, K: int, weights=None):
        """All subsets of at most K streams, uniform weights by default."""
        n = len(streams)
        count = sum(math.comb(n, k) for k in range(1, K + 1))
        if count > MAX_SUBSETS:
            raise CapacityError(f"{count} subsets exceed the enumeration limit {MAX_SUBSETS}")
        subs = sorted(sum(1 << s for s in c) for k in range(1, K + 1)
                      for c in itertools.combinations(range(n), k))
        w = np.full(len(subs), 1.0 / len(subs)) if weights is None else weights
        return cls(tuple(streams), tuple(subs), w)

    def membership(self) -> np.ndarray:
        """Indicator matrix of shape (n_subsets, n_streams)."""
        n = len(self.streams)
        return np.array([[(s >> k) & 1 for k in range(n)] for s in self.subsets], dtype=float)

    def source(self, subset: int = 0):
        """Observation source with signal in the streams of bitmask ``subset``."""
        def draw(rng, m, t0, k):
            cols = [self.streams[s][1 if (subset >> s) & 1 else 0].sample(rng, (m, k))
                    for s in range(len(self.streams))]
            return np.stack(cols, axis=-1)
        return draw


class MultistreamProcedure(Procedure):
    """Stop when max_B(lambda_B + log pi1_B) >= a1 (signal, d=1) or
    max_B(lambda_B + log pi0_B) <= -a0 (no signal, d=0)."""

    def __init__(self, spec: StreamsSpec, a0: float, a1: float, pi1=None, pi0=None):
        if a0 <= 0 or a1 <= 0:
            raise PreconditionError("multistream thresholds must be positive")
        self.spec, self.a0, self.a1 = spec, a0, a1
        self.event_shape = (len(spec.streams),)
        self.M = spec.membership()
        self.log_pi1 = np.log(spec.weights if pi1 is None else np.asarray(pi1, float))
        self.log_pi0 = np.log(spec.weights if pi0 is None else np.asarray(pi0, float))

    def init(self, m):
        return {"lam": np.zeros((m, len(self.spec.streams)))}

    def advance(self, state, x):
        z = np.stack([s[1].logpdf(x[:, k]) - s[0].logpdf(x[:, k])
                      for k, s in enumerate(self.spec.streams)], axis=1)
        state["lam"] = state["lam"] + z
        lam_b = state["lam"] @ self.M.T
        up = (lam_b + self.log_pi1).max(axis=1)
        down = (lam_b + self.log_pi0).max(axis=1)
        return np.where(up >= self.a1, 1, np.where(down <= -self.a0, 0, CONTINUE))

    def statistic(self, state):
        return (state["lam"] @ self.M.T + self.log_pi1).max(axis=1)

    def argmax_subset(self, state):
        """Most likely signal subset; ties go to the lowest bitmask."""
        scores = state["lam"] @ self.M.T + self.log_pi1
        order = np.argsort(self.spec.subsets, kind="stable")
        return np.asarray(self.spec.subsets)[order][scores[:, order].argmax(axis=1)]

    def truncation_decision(self, state):
        return (self.statistic(state) > 0).astype(np.int64)


def run_multistream_gslrt(spec: StreamsSpec, a0: float, a1: float, stream, cap: int = DEFAULT_CAP,
                          pi1=None, pi0=None) -> TestOutcome:
    return run_stream(MultistreamProcedure(spec, a0, a1, pi1, pi0), stream, cap)


def multistream_weights(prior, lnums):
    """Overshoot-adjusted weights pi1 ~ pi / L_B and pi0 ~ pi * L_B."""
    prior, lnums = np.asarray(prior, float), np.asarray(lnums, float)
    if np.any(prior <= 0) or np.any(lnums <= 0) or np.any(lnums > 1):
        raise PreconditionError("weights must be positive and L-numbers in (0, 1]")
    pi1 = prior / lnums
    pi0 = prior * lnums
    return pi1 / pi1.sum(), pi0 / pi0.sum()

"""Probability models: simple hypotheses, one-parameter exponential families,
log-likelihood-ratio paths, information numbers and the clamped MLE."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats

from ._numeric import bisect_increasing
from .errors import DomainError, PreconditionError


class DegenerateHypothesesWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Exponential families


@dataclass(frozen=True)
class ExpFamily1D:
    """One-parameter exponential family f_theta(x) = h(x) exp(theta x - b(theta)).

    ``sum_dist(theta, n)`` returns the frozen scipy distribution of the sum of
    ``n`` observations, which lets renewal series and fixed-sample sizes be
    computed exactly.
    """

    name: str
    b: Callable
    bdot: Callable
    bddot: Callable
    theta_space: tuple
    sampler: Callable  # (theta, rng, size) -> array
    logpdf: Callable  # (theta, x) -> array
    bdot_inv: Optional[Callable] = None
    sum_dist: Optional[Callable] = None
    integer_valued: bool = False

    def kl(self, theta, theta_i):
        """I(theta, theta_i) = (theta - theta_i) b'(theta) - (b(theta) - b(theta_i))."""
        return (theta - theta_i) * self.bdot(theta) - (self.b(theta) - self.b(theta_i))

    def llr(self, theta, theta_i, s, n):
        """log f_theta / f_theta_i over n observations with sum s."""
        return (theta - theta_i) * s - n * (self.b(theta) - self.b(theta_i))

    def sample(self, theta, rng, size):
        return self.sampler(theta, rng, size)

    def distribution(self, theta) -> "Distribution":
        return Distribution(
            logpdf=lambda x, t=theta: self.logpdf(t, x),
            sampler=lambda rng, size, t=theta: self.sampler(t, rng, size),
            kind="discrete" if self.integer_valued else "continuous",
            name=f"{self.name}(theta={theta:g})",
            family=self,
            theta=float(theta),
        )

    def check_theta(self, theta):
        lo, hi = self.theta_space
        if not lo <= theta <= hi:
            raise PreconditionError(f"theta={theta} outside {self.name} parameter space [{lo}, {hi}]")


def _bern_logpdf(theta, x):
    x = np.asarray(x, dtype=float)
    bad = (x != 0) & (x != 1)
    out = theta * x - np.logaddexp(0.0, theta)
    return np.where(bad, -np.inf, out)


def bernoulli_family(bound=30.0) -> ExpFamily1D:
    """Bernoulli in the natural (logit) parameter."""
    return ExpFamily1D(
        name="bernoulli",
        b=lambda t: np.logaddexp(0.0, t),
        bdot=special.expit,
        bddot=lambda t: special.expit(t) * special.expit(-t),
        theta_space=(-bound, bound),
        sampler=lambda t, rng, size: (rng.random(size) < special.expit(t)).astype(float),
        logpdf=_bern_logpdf,
        bdot_inv=special.logit,
        sum_dist=lambda t, n: stats.binom(n, special.expit(t)),
        integer_valued=True,
    )


def gaussian_family(bound=50.0) -> ExpFamily1D:
    """N(theta, 1)."""
    return ExpFamily1D(
        name="gaussian-unit-variance",
        b=lambda t: 0.5 * np.square(t),
        bdot=lambda t: t,
        bddot=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        theta_space=(-bound, bound),
        sampler=lambda t, rng, size: t + rng.standard_normal(size),
        logpdf=lambda t, x: stats.norm.logpdf(x, loc=t),
        bdot_inv=lambda m: m,
        sum_dist=lambda t, n: stats.norm(n * t, np.sqrt(n)),
    )


def poisson_family(bound=10.0) -> ExpFamily1D:
    """Poisson with theta = log(mean)."""
    return ExpFamily1D(
        name="poisson",
        b=np.exp,
        bdot=np.exp,
        bddot=np.exp,
        theta_space=(-bound, bound),
        sampler=lambda t, rng, size: rng.poisson(math.exp(t), size).astype(float),
        logpdf=lambda t, x: stats.poisson.logpmf(x, math.exp(t)),
        bdot_inv=np.log,
        sum_dist=lambda t, n: stats.poisson(n * math.exp(t)),
        integer_valued=True,
    )


def exponential_family(bound=1e-6) -> ExpFamily1D:
    """Exponential(rate) with theta = -rate, so b(theta) = -log(-theta)."""
    return ExpFamily1D(
        name="exponential-rate",
        b=lambda t: -np.log(-np.asarray(t, dtype=float)),
        bdot=lambda t: -1.0 / np.asarray(t, dtype=float),
        bddot=lambda t: 1.0 / np.square(t),
        theta_space=(-1e6, -bound),
        sampler=lambda t, rng, size: rng.exponential(-1.0 / t, size),
        logpdf=lambda t, x: stats.expon.logpdf(x, scale=-1.0 / t),
        bdot_inv=lambda m: -1.0 / np.asarray(m, dtype=float),
        sum_dist=lambda t, n: stats.gamma(n, scale=-1.0 / t),
    )


FAMILIES = {
    "bernoulli": bernoulli_family,
    "gaussian-unit-variance": gaussian_family,
    "poisson": poisson_family,
    "exponential-rate": exponential_family,
}


def natural_parameter(kind: str, value: float) -> float:
    """Map the usual parameter (p, mean, mean, rate) to the natural one."""
    if kind == "bernoulli":
        if not 0 < value < 1:
            raise PreconditionError(f"Bernoulli p must lie in (0,1), got {value}")
        return float(special.logit(value))
    if kind == "gaussian-unit-variance":
        return float(value)
    if kind == "poisson":
        if value <= 0:
            raise PreconditionError(f"Poisson mean must be positive, got {value}")
        return math.log(value)
    if kind == "exponential-rate":
        if value <= 0:
            raise PreconditionError(f"exponential rate must be positive, got {value}")
        return -float(value)
    raise PreconditionError(f"unknown family {kind!r}")


# ---------------------------------------------------------------------------
# Simple hypotheses


@dataclass(frozen=True)
class Distribution:
    """A single sampling distribution with vectorized log-density and sampler."""

    logpdf: Callable
    sampler: Callable  # (rng, size) -> array
    kind: str = "continuous"
    name: str = ""
    alphabet: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    family: Optional[ExpFamily1D] = None
    theta: Optional[float] = None

    def sample(self, rng, size):
        return self.sampler(rng, size)

    @classmethod
    def finite(cls, alphabet, probs, name=""):
        alphabet = np.asarray(alphabet, dtype=float)
        probs = np.asarray(probs, dtype=float)
        if alphabet.shape != probs.shape or alphabet.ndim != 1:
            raise PreconditionError("alphabet and probabilities must be 1-d of equal length")
        if len(np.unique(alphabet)) != len(alphabet):
            raise PreconditionError("alphabet letters must be distinct")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise PreconditionError(f"probabilities must be nonnegative and sum to 1, got {probs}")
        order = np.argsort(alphabet)
        alphabet, probs = alphabet[order], probs[order]
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        cdf = np.cumsum(probs)

        def logpdf(x):
            x = np.asarray(x, dtype=float)
            idx = np.clip(np.searchsorted(alphabet, x), 0, len(alphabet) - 1)
            return np.where(alphabet[idx] == x, logp[idx], -np.inf)

        def sampler(rng, size):
            u = rng.random(size)
            return alphabet[np.minimum(np.searchsorted(cdf, u, side="right"), len(alphabet) - 1)]

        return cls(logpdf, sampler, "discrete", name, alphabet, probs)


@dataclass(frozen=True)
class SimpleModel:
    """A finite family f_0, ..., f_N of mutually absolutely continuous hypotheses."""

    hypotheses: tuple

    def __post_init__(self):
        hyps = tuple(self.hypotheses)
        object.__setattr__(self, "hypotheses", hyps)
        if len(hyps) < 2:
            raise PreconditionError("a model needs at least two hypotheses")
        kinds = {h.kind for h in hyps}
        if len(kinds) != 1:
            raise PreconditionError("all hypotheses must share a support kind")
        if hyps[0].alphabet is not None:
            for h in hyps:
                if h.alphabet is None or not np.array_equal(h.alphabet, hyps[0].alphabet):
                    raise PreconditionError("finite hypotheses must share one alphabet")
                if np.any(h.probs <= 0):
                    raise DomainError(f"hypothesis {h.name!r} puts zero mass on a letter; "
                                      "hypotheses must be mutually absolutely continuous")

    def __len__(self):
        return len(self.hypotheses)

    def __getitem__(self, i) -> Distribution:
        return self.hypotheses[i]

    @property
    def n_alt(self):
        """N, the number of hypotheses minus one."""
        return len(self.hypotheses) - 1

    @property
    def support_kind(self):
        return self.hypotheses[0].kind

    @property
    def alphabet(self):
        return self.hypotheses[0].alphabet

    @property
    def family(self) -> Optional[ExpFamily1D]:
        fams = {id(h.family) for h in self.hypotheses}
        if self.hypotheses[0].family is not None and len(fams) == 1:
            return self.hypotheses[0].family
        return None

    @property
    def thetas(self):
        return tuple(h.theta for h in self.hypotheses)

    def logpdf_matrix(self, x):
        """Array of shape x.shape + (N+1,) with log f_k(x)."""
        return np.stack([h.logpdf(x) for h in self.hypotheses], axis=-1)

    @classmethod
    def finite(cls, alphabet, probs):
        """``probs`` has one row per hypothesis."""
        return cls(tuple(Distribution.finite(alphabet, p, name=f"H{k}") for k, p in enumerate(probs)))

    @classmethod
    def bernoulli(cls, ps: Sequence[float]):
        fam = bernoulli_family()
        hyps = []
        for p in ps:
            d = Distribution.finite([0.0, 1.0], [1 - p, p], name=f"Bern({p:g})")
            hyps.append(Distribution(d.logpdf, d.sampler, "discrete", d.name, d.alphabet, d.probs,
                                     fam, float(special.logit(p))))
        return cls(tuple(hyps))

    @classmethod
    def from_family(cls, fam: ExpFamily1D, thetas: Sequence[float]):
        for t in thetas:
            fam.check_theta(t)
        return cls(tuple(fam.distribution(t) for t in thetas))


def log_ratio(model: SimpleModel, i: int, j: int, x):
    """log f_i(x) - log f_j(x), vectorized over ``x``."""
    if i == j:
        raise PreconditionError("log_ratio needs two distinct hypotheses")
    li = np.asarray(model[i].logpdf(x), dtype=float)
    lj = np.asarray(model[j].logpdf(x), dtype=float)
    for k, v in ((i, li), (j, lj)):
        if not np.all(np.isfinite(v)):
            bad = np.asarray(x).ravel()[~np.isfinite(v).ravel()][0]
            raise DomainError(f"density of hypothesis {k} is zero or non-finite at x={bad}")
    out = li - lj
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LlrPath:
    increments: np.ndarray
    cumulative: np.ndarray

    @property
    def n(self):
        return len(self.increments)


def llr_path(model: SimpleModel, i: int, j: int, observations) -> LlrPath:
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        raise PreconditionError("llr_path needs at least one observation")
    z = np.empty(len(obs))
    for t, x in enumerate(obs):
        try:
            z[t] = log_ratio(model, i, j, x)
        except DomainError as exc:
            raise DomainError(f"observation {t}: {exc}") from exc
    return LlrPath(z, np.cumsum(z))


def kl(model: SimpleModel, i: int, j: int, reps: int = 200_000, seed: int = 0) -> float:
    """Kullback-Leibler number I_ij = E_i[log f_i(X)/f_j(X)].

    Closed form for exponential-family and finite-alphabet models; Monte Carlo
    otherwise (see :func:`kl_mc`).
    """
    if i == j:
        return 0.0
    fam = model.family
    if fam is not None:
        return float(fam.kl(model[i].theta, model[j].theta))
    if model.alphabet is not None:
        p, q = model[i].probs, model[j].probs
        return float(np.sum(p * (np.log(p) - np.log(q))))
    value, _ = kl_mc(model, i, j, reps, seed)
    return value


def kl_mc(model: SimpleModel, i: int, j: int, reps: int = 200_000, seed: int = 0):
    """Monte Carlo estimate of I_ij with its standard error."""
    rng = np.random.default_rng(seed)
    x = model[i].sample(rng, reps)
    z = log_ratio(model, i, j, x)
    mean, se = float(np.mean(z)), float(np.std(z, ddof=1) / math.sqrt(reps))
    if mean <= 3 * se:
        warnings.warn(f"KL estimate {mean:.3g} (SE {se:.2g}) is not significantly positive; "
                      f"hypotheses {i} and {j} may be indistinguishable", DegenerateHypothesesWarning)
    return mean, se


def mle_clamped(fam: ExpFamily1D, s_n, n, interval=None, method="bisect"):
    """Maximizer of theta*S_n - n*b(theta) over ``interval``.

    ``method="bisect"`` solves b'(theta) = S_n/n by bisection (vectorized over
    array ``s_n``/``n``); ``method="closed"`` uses the family's inverse mean map.
    """
    lo, hi = fam.theta_space if interval is None else interval
    flo, fhi = fam.theta_space
    if lo > hi or lo < flo or hi > fhi:
        raise PreconditionError(f"interval [{lo}, {hi}] not inside parameter space [{flo}, {fhi}]")
    mean = np.asarray(s_n, dtype=float) / np.asarray(n, dtype=float)
    if method == "closed" and fam.bdot_inv is not None:
        m_lo, m_hi = fam.bdot(lo), fam.bdot(hi)
        inner = np.clip(mean, m_lo, m_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(mean <= m_lo, lo, np.where(mean >= m_hi, hi, fam.bdot_inv(inner)))
        theta = np.clip(theta, lo, hi)
    else:
        theta = bisect_increasing(fam.bdot, mean, lo, hi, xtol=1e-10)
    return float(theta) if np.ndim(theta) == 0 else theta


# ---------------------------------------------------------------------------
# Config


def model_from_config(cfg: dict) -> SimpleModel:
    """Build a model from a mapping with ``kind`` and ``params`` (one per hypothesis).

    ``custom-discrete`` takes ``alphabet`` and ``probs`` (one row per hypothesis).
    """
    kind = cfg.get("kind")
    if kind == "custom-discrete":
        return SimpleModel.finite(cfg["alphabet"], cfg["probs"])
    if kind not in FAMILIES:
        raise PreconditionError(f"unknown model kind {kind!r}; expected one of "
                                f"{sorted(FAMILIES) + ['custom-discrete']}")
    params = cfg.get("params")
    if not params or len(params) < 2:
        raise PreconditionError("model.params must list at least two hypotheses")
    if kind == "bernoulli":
        return SimpleModel.bernoulli(params)
    fam = FAMILIES[kind]()
    return SimpleModel.from_family(fam, [natural_parameter(kind, v) for v in params])


def family_from_config(kind: str) -> ExpFamily1D:
    if kind not in FAMILIES:
        raise PreconditionError(f"unknown family {kind!r}")
    return FAMILIES[kind]()

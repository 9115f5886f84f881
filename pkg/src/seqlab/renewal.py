"""Overshoot quantities for random walks with positive drift: Lorden's bound on
the expected excess over a boundary, the renewal-series L-numbers and the
zeta correction factors derived from them."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ConvergenceError, PreconditionError
from .harness import derive_rng
from .model import SimpleModel, kl

RUNAWAY_STEPS = 1_000_000


@dataclass(frozen=True)
class StepDistribution:
    """Distribution of a random-walk increment Z.

    ``mean`` and ``pos_second_moment`` (E[(Z+)^2]) are exact when known and
    otherwise estimated once by Monte Carlo in :meth:`from_sampler`.
    """

    sampler: Callable  # (rng, size) -> array
    mean: float
    pos_second_moment: float
    name: str = ""

    def sample(self, rng, size):
        return self.sampler(rng, size)

    @classmethod
    def constant(cls, c: float):
        return cls(lambda rng, size: np.full(size, float(c)), float(c), max(c, 0.0) ** 2, f"const({c:g})")

    @classmethod
    def exponential(cls, rate: float = 1.0):
        return cls(lambda rng, size: rng.exponential(1.0 / rate, size), 1.0 / rate, 2.0 / rate ** 2,
                   f"Exp({rate:g})")

    @classmethod
    def two_point(cls, up: float, down: float, p_up: float):
        """Z = up with probability p_up, else down."""
        mean = p_up * up + (1 - p_up) * down
        pos2 = p_up * max(up, 0.0) ** 2 + (1 - p_up) * max(down, 0.0) ** 2
        return cls(lambda rng, size: np.where(rng.random(size) < p_up, up, down), mean, pos2,
                   f"two-point({up:g}@{p_up:g}, {down:g})")

    @classmethod
    def gaussian(cls, mu: float, sigma: float = 1.0):
        r = mu / sigma
        pos2 = (mu ** 2 + sigma ** 2) * stats.norm.cdf(r) + mu * sigma * stats.norm.pdf(r)
        return cls(lambda rng, size: mu + sigma * rng.standard_normal(size), mu, float(pos2),
                   f"N({mu:g},{sigma:g}^2)")

    @classmethod
    def finite(cls, values, probs):
        values, probs = np.asarray(values, float), np.asarray(probs, float)
        cdf = np.cumsum(probs)

        def sampler(rng, size):
            return values[np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), len(values) - 1)]

        return cls(sampler, float(probs @ values), float(probs @ np.maximum(values, 0) ** 2), "finite")

    @classmethod
    def from_sampler(cls, sampler, reps: int = 400_000, seed: int = 0, name: str = ""):
        """Moments estimated from ``reps`` draws."""
        z = sampler(np.random.default_rng(seed), reps)
        mean, se = float(z.mean()), float(z.std(ddof=1) / math.sqrt(reps))
        if mean <= 3 * se:
            raise PreconditionError(f"estimated step mean {mean:.3g} (SE {se:.2g}) is not positive")
        return cls(sampler, mean, float(np.mean(np.maximum(z, 0) ** 2)), name)


def llr_step(model: SimpleModel, i: int, j: int) -> StepDistribution:
    """Distribution of lambda_ij(1) under hypothesis i."""
    hi, hj = model[i], model[j]
    fam = model.family
    if model.alphabet is not None:
        z = hi.logpdf(model.alphabet) - hj.logpdf(model.alphabet)
        return StepDistribution.finite(z, hi.probs)
    if fam is not None and fam.name == "gaussian-unit-variance":
        delta = hi.theta - hj.theta
        return StepDistribution.gaussian(0.5 * delta ** 2, abs(delta))

    def sampler(rng, size):
        x = hi.sample(rng, size)
        return hi.logpdf(x) - hj.logpdf(x)

    return StepDistribution.from_sampler(sampler)


def lorden_bound(z: StepDistribution) -> float:
    """E[(Z+)^2] / E[Z], an upper bound on the expected overshoot for every boundary."""
    if not z.mean > 0:
        raise PreconditionError(f"step mean must be positive, got {z.mean}")
    if not math.isfinite(z.pos_second_moment):
        raise PreconditionError("E[(Z+)^2] must be finite")
    return z.pos_second_moment / z.mean


# ---------------------------------------------------------------------------
# Overshoot sweep


@dataclass(frozen=True)
class OvershootReport:
    bound: float
    empirical_sup: float
    grid: np.ndarray
    reps: int
    means: np.ndarray = field(repr=False)
    ses: np.ndarray = field(repr=False)

    @property
    def max_se(self):
        return float(np.max(self.ses))

    @property
    def holds(self):
        return self.empirical_sup <= self.bound + 3 * self.max_se


def hybrid_grid(a_max: float, n: int = 40) -> np.ndarray:
    """Boundary grid on [0, a_max]: zero, a geometric run near zero (where the
    overshoot is still far from its limit) and an evenly spaced remainder."""
    if a_max <= 0 or n < 4:
        raise PreconditionError("grid needs a_max > 0 and at least 4 points")
    n_geo = n // 4
    geo = np.geomspace(a_max / 1000, a_max / 10, n_geo, endpoint=False)
    lin = np.linspace(a_max / 10, a_max, n - n_geo - 1)
    return np.concatenate([[0.0], geo, lin])


def first_crossings(z: StepDistribution, a_grid, rng, m: int, strict: bool = True,
                    max_steps: int = RUNAWAY_STEPS):
    """Simulate ``m`` walks and return (overshoots, crossing times), each of
    shape (m, len(a_grid)), for T(a) = inf{n: S_n > a} (``>=`` if not strict)."""
    a = np.asarray(a_grid, dtype=float)
    R = np.full((m, a.size), np.nan)
    T = np.zeros((m, a.size), dtype=np.int64)
    s = np.zeros(m)
    rows = np.arange(m)
    t = 0
    chunk = 64
    while rows.size:
        if t >= max_steps:
            raise PreconditionError(f"{rows.size} walks failed to cross {a.max():g} within "
                                    f"{max_steps} steps; the drift is probably not positive")
        C = s[rows, None] + np.cumsum(z.sample(rng, (rows.size, chunk)), axis=1)
        for g in range(a.size):
            todo = np.isnan(R[rows, g])
            if not todo.any():
                continue
            hit = (C[todo] > a[g]) if strict else (C[todo] >= a[g])
            anyhit = hit.any(axis=1)
            first = hit.argmax(axis=1)
            r = rows[todo][anyhit]
            R[r, g] = C[todo][anyhit, first[anyhit]] - a[g]
            T[r, g] = t + 1 + first[anyhit]
        s[rows] = C[:, -1]
        t += chunk
        rows = rows[np.isnan(R[rows]).any(axis=1)]
    return R, T


def overshoot_sweep(z: StepDistribution, a_grid: Sequence[float], reps: int = 100_000,
                    seed: int = 0, block: int = 20_000) -> OvershootReport:
    """Monte Carlo E[R_a] across a boundary grid, compared with Lorden's bound."""
    if reps < 1000:
        raise PreconditionError("overshoot sweep needs at least 1000 replications")
    bound = lorden_bound(z)
    a = np.asarray(a_grid, dtype=float)
    total = np.zeros(a.size)
    total2 = np.zeros(a.size)
    done = 0
    k = 0
    while done < reps:
        m = min(block, reps - done)
        R, _ = first_crossings(z, a, derive_rng(seed, k), m)
        total += R.sum(axis=0)
        total2 += np.square(R).sum(axis=0)
        done += m
        k += 1
    means = total / reps
    ses = np.sqrt(np.maximum(total2 / reps - means ** 2, 0) * reps / (reps - 1) / reps)
    return OvershootReport(bound, float(means.max()), a, reps, means, ses)


# ---------------------------------------------------------------------------
# L-numbers


@dataclass(frozen=True)
class LNumber:
    value: float
    n_terms_used: int
    term_estimates: list
    method: str
    se: float = 0.0


@dataclass(frozen=True)
class AffineLlr:
    """lambda(n) = A * S - n * B where S ~ sum_dist(n * per_step) under each side."""

    A: float
    B: float
    dist_i: Callable
    dist_j: Callable
    integer: bool


def affine_llr_form(model: SimpleModel, i: int, j: int) -> Optional[AffineLlr]:
    fam = model.family
    if fam is not None and fam.sum_dist is not None:
        ti, tj = model[i].theta, model[j].theta
        return AffineLlr(ti - tj, float(fam.b(ti) - fam.b(tj)),
                       lambda n: fam.sum_dist(ti, n), lambda n: fam.sum_dist(tj, n), fam.integer_valued)
    alph = model.alphabet
    if alph is not None and len(alph) == 2:
        li = model[i].logpdf(alph) - model[j].logpdf(alph)
        qi, qj = model[i].probs[1], model[j].probs[1]
        return AffineLlr(float(li[1] - li[0]), float(-li[0]),
                       lambda n: stats.binom(n, qi), lambda n: stats.binom(n, qj), True)
    return None


def _exact_terms(form: AffineLlr, ns: np.ndarray, per_step: int = 1):
    """Series terms (1/n)[P_j(lambda > 0) + P_i(lambda <= 0)] for each n."""
    N = ns * per_step
    s_star = N * form.B / form.A
    if form.integer:
        eps = 1e-9 * np.maximum(1.0, np.abs(s_star))
        if form.A > 0:
            k = np.floor(s_star + eps)  # lambda > 0 iff S >= k + 1
            pj_pos = form.dist_j(N).sf(k)
            pi_nonpos = form.dist_i(N).cdf(k)
        else:
            k = np.ceil(s_star - eps) - 1  # lambda > 0 iff S <= k
            pj_pos = form.dist_j(N).cdf(k)
            pi_nonpos = form.dist_i(N).sf(k)
    else:
        if form.A > 0:
            pj_pos = form.dist_j(N).sf(s_star)
            pi_nonpos = form.dist_i(N).cdf(s_star)
        else:
            pj_pos = form.dist_j(N).cdf(s_star)
            pi_nonpos = form.dist_i(N).sf(s_star)
    return (pj_pos + pi_nonpos) / ns


def _series_limit(info_sum: float, tol: float) -> int:
    return int(math.ceil(10.0 / info_sum * abs(math.log(tol))))


def _truncate(terms, tol):
    """Index just past the third consecutive term below ``tol``, or None."""
    run = 0
    for k, v in enumerate(terms):
        run = run + 1 if v < tol else 0
        if run == 3:
            return k + 1
    return None


def _exact_series(form: AffineLlr, n_max: int, tol: float, per_step: int = 1):
    terms = np.empty(0)
    start = 1
    while start <= n_max:
        ns = np.arange(start, min(start + 256, n_max + 1))
        terms = np.concatenate([terms, _exact_terms(form, ns.astype(float), per_step)])
        stop = _truncate(terms, tol)
        if stop is not None:
            terms = terms[:stop]
            return LNumber(float(math.exp(-terms.sum())), len(terms),
                           [(float(t), 0.0) for t in terms], "exact-series")
        start = ns[-1] + 1
    raise ConvergenceError(f"L-number series not converged after {n_max} terms "
                           f"(last term {terms[-1]:.3g}, tol {tol:g})")


def _mc_series(draw_i: Callable, draw_j: Callable, n_max: int, tol: float, reps: int, seed: int):
    """MC version: ``draw_h(rng, m, k)`` returns LLR increments of shape (m, k)
    under hypothesis h."""
    rng_i, rng_j = derive_rng(seed, 0), derive_rng(seed, 1)
    s_i, s_j = np.zeros(reps), np.zeros(reps)
    y_i, y_j = np.zeros(reps), np.zeros(reps)
    terms, ses = [], []
    n = 0
    while n < n_max:
        k = min(64, n_max - n)
        ci = s_i[:, None] + np.cumsum(draw_i(rng_i, reps, k), axis=1)
        cj = s_j[:, None] + np.cumsum(draw_j(rng_j, reps, k), axis=1)
        inv_n = 1.0 / np.arange(n + 1, n + k + 1)
        ind_i = (ci <= 0) * inv_n
        ind_j = (cj > 0) * inv_n
        y_i += ind_i.sum(axis=1)
        y_j += ind_j.sum(axis=1)
        pi, pj = ind_i.mean(axis=0), ind_j.mean(axis=0)
        terms.extend(pi + pj)
        ses.extend(np.sqrt((ind_i.var(axis=0) + ind_j.var(axis=0)) / reps))
        s_i, s_j = ci[:, -1], cj[:, -1]
        n += k
        stop = _truncate(terms, tol)
        if stop is not None:
            exponent = float(np.sum(terms[:stop]))
            value = math.exp(-exponent)
            # per-replication sums are i.i.d., so their spread gives the SE of the exponent
            se = value * math.sqrt((y_i.var(ddof=1) + y_j.var(ddof=1)) / reps)
            return LNumber(value, stop, list(zip(map(float, terms[:stop]), map(float, ses[:stop]))),
                           "mc-series", se)
    raise ConvergenceError(f"L-number series not converged after {n_max} terms")


def l_number(model: SimpleModel, i: int, j: int, tol: float = 1e-6, reps: int = 20_000,
             seed: int = 0) -> LNumber:
    """L_ij = exp{-sum_n n^-1 [P_j(lambda_ij(n) > 0) + P_i(lambda_ij(n) <= 0)]}.

    Exact term by term when lambda_ij(n) is a monotone function of a sum with a
    known distribution (exponential families, two-letter alphabets); Monte Carlo
    otherwise. The series is cut after three consecutive terms below ``tol``.
    """
    if i == j:
        return LNumber(1.0, 0, [], "exact-series")
    n_max = _series_limit(kl(model, i, j) + kl(model, j, i), tol)
    form = affine_llr_form(model, i, j)
    if form is not None:
        return _exact_series(form, n_max, tol)
    hi, hj = model[i], model[j]

    def increments(h):
        def draw(rng, m, k):
            x = h.sample(rng, (m, k))
            return hi.logpdf(x) - hj.logpdf(x)
        return draw

    return _mc_series(increments(hi), increments(hj), n_max, tol, reps, seed)


def l_number_family(fam, theta: float, theta_i: float, tol: float = 1e-6) -> float:
    """L(theta, theta_i) between two members of an exponential family."""
    return l_number(SimpleModel.from_family(fam, [theta, theta_i]), 0, 1, tol).value


def zeta_family(fam, theta: float, theta_i: float, tol: float = 1e-6) -> float:
    """zeta(theta, theta_i) = L(theta, theta_i) / I(theta, theta_i)."""
    return l_number_family(fam, theta, theta_i, tol) / float(fam.kl(theta, theta_i))


def l_number_multistream(streams: Sequence[SimpleModel], subset: Sequence[int], tol: float = 1e-6,
                         reps: int = 20_000, seed: int = 0) -> LNumber:
    """L_B for the sum of per-stream LLRs over the streams in ``subset``.

    Each stream model has the null density at index 0 and the signal density at
    index 1. Identical streams reduce to a pair series over |B| n observations.
    """
    subset = list(subset)
    if not subset:
        raise PreconditionError("subset must be nonempty")
    models = [streams[k] for k in subset]
    info = sum(kl(mdl, 1, 0) + kl(mdl, 0, 1) for mdl in models)
    n_max = _series_limit(info, tol)
    first = models[0]
    same = all(mdl.family is not None and first.family is not None and mdl.family.name == first.family.name
               and mdl.thetas == first.thetas for mdl in models)
    form = affine_llr_form(first, 1, 0)
    if same and form is not None:
        return _exact_series(form, n_max, tol, per_step=len(models))

    def draw_under(signal: bool):
        def draw(rng, m, k):
            total = np.zeros((m, k))
            for mdl in models:
                x = mdl[1 if signal else 0].sample(rng, (m, k))
                total += mdl[1].logpdf(x) - mdl[0].logpdf(x)
            return total
        return draw

    return _mc_series(draw_under(True), draw_under(False), n_max, tol, reps, seed)


def zeta(model: SimpleModel, i: int, j: int, arithmetic: Optional[bool] = None, **kw) -> float:
    """zeta_ij = L_ij / I_ij, the limiting E_i[exp(-overshoot)] of lambda_ij.

    For lattice LLRs the limit does not exist; pass ``arithmetic=True`` to
    acknowledge that the value is then only a smoothed surrogate.
    """
    if arithmetic is None and _lattice(model, i, j):
        warnings.warn("LLR increments are lattice-valued; zeta is only a smoothed surrogate",
                      RuntimeWarning, stacklevel=2)
    return l_number(model, i, j, **kw).value / kl(model, i, j)


def _lattice(model, i, j):
    alph = model.alphabet
    if alph is None:
        return bool(model.family is not None and model.family.integer_valued)
    z = model[i].logpdf(alph) - model[j].logpdf(alph)
    z = z[z != 0]
    if z.size < 2:
        return True
    ratio = z[1:] / z[0]
    return bool(np.all(np.abs(ratio - np.round(ratio)) < 1e-9))


def zeta_mc(model: SimpleModel, i: int, j: int, a: float = 25.0, reps: int = 20_000,
            seed: int = 0):
    """Direct Monte Carlo E_i[exp{-(lambda_ij(tau) - a)}] with tau the first
    passage of lambda_ij above ``a``. Returns (mean, se)."""
    hi, hj = model[i], model[j]

    def sampler(rng, size):
        x = hi.sample(rng, size)
        return hi.logpdf(x) - hj.logpdf(x)

    step = StepDistribution(sampler, kl(model, i, j), math.nan, "llr")
    R, _ = first_crossings(step, [a], derive_rng(seed, 0), reps, strict=False)
    e = np.exp(-R[:, 0])
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(reps))

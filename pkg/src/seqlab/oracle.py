"""Exact optimal truncated tests by backward induction on (n, S_n) lattices,
exact operating characteristics, and brute-force cross-checks."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .engine import TestOutcome
from .errors import CalibrationError, CapacityError, PreconditionError
from .model import Distribution, SimpleModel

STOP0, STOP1, CONTINUE = 0, 1, 2
MAX_PATHS = 10_000_000
MAX_HORIZON = 200  # binary alphabet; the cap scales down with the alphabet size


@dataclass(frozen=True)
class Lattice:
    """Integer alphabet 0..K-1 (after shifting) with per-measure letter
    probabilities. ``log p_k(x) - log p_ref(x) = alpha_k + beta_k x`` for every
    measure k, so (n, S_n) is a sufficient state."""

    letters: np.ndarray  # original alphabet values
    probs: np.ndarray  # (n_measures, K)
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def K(self):
        return self.probs.shape[1]


def make_lattice(dists) -> Lattice:
    alph = dists[0].alphabet
    if alph is None or any(d.alphabet is None or not np.array_equal(d.alphabet, alph) for d in dists):
        raise PreconditionError("the oracle needs finite-alphabet models sharing one alphabet")
    shift = alph - alph[0]
    if not np.allclose(shift, np.arange(len(alph))):
        raise PreconditionError("alphabet letters must be consecutive integers")
    probs = np.array([d.probs for d in dists])
    if np.any(probs <= 0):
        raise PreconditionError("all letters need positive probability under every measure")
    logp = np.log(probs)
    x = np.arange(len(alph), dtype=float)
    alpha, beta = np.zeros(len(dists)), np.zeros(len(dists))
    for k in range(len(dists)):
        r = logp[k] - logp[0]
        beta[k] = (r[-1] - r[0]) / (len(alph) - 1) if len(alph) > 1 else 0.0
        alpha[k] = r[0]
        if not np.allclose(r, alpha[k] + beta[k] * x, atol=1e-9):
            raise PreconditionError("log-likelihood ratios are not affine in the observation; "
                                    "(n, S_n) would not be a sufficient state")
    return Lattice(alph, probs, alpha, beta)


@dataclass
class DpGrid:
    """Backward-induction solution. ``value[n]`` and ``policy[n]`` are indexed by
    S = 0..n(K-1) (sum of shifted letters); layer 0 is the root."""

    H: int
    value: list
    policy: list
    root_value: float
    objective: str
    oc: Optional["ExactOC"] = None
    meta: dict = field(default_factory=dict)

    def boundaries(self):
        """Rows (n, S_lower, S_upper) of the continuation interval at each n < H;
        empty rows are (n, nan, nan)."""
        rows = []
        for n in range(1, self.H):
            cont = np.nonzero(self.policy[n] == CONTINUE)[0]
            if cont.size:
                if cont[-1] - cont[0] + 1 != cont.size:
                    raise AssertionError(f"continuation region at n={n} is not an interval")
                rows.append((n, int(cont[0]), int(cont[-1])))
            else:
                rows.append((n, math.nan, math.nan))
        return rows


@dataclass(frozen=True)
class ExactOC:
    """Exact operating characteristics under each measure.

    ``p_decide[k, d]`` = P_k(decision d); ``ess[k]`` = E_k[T]. ``p_truncated[k]``
    is P_k(T = H) for a propagated policy, which cannot tell a forced stop at the
    horizon from a boundary crossing there, and P_k(run flagged truncated) for
    path enumeration."""

    p_decide: np.ndarray
    ess: np.ndarray
    p_truncated: np.ndarray


def _backward(lat: Lattice, H: int, stop_costs: Callable, step_cost: float, trans: Callable):
    """Generic backward induction. ``stop_costs(n, S)`` returns (cost of d=0,
    cost of d=1) arrays; ``trans(n, S)`` returns letter probabilities (len(S), K)."""
    K = lat.K
    value = [None] * (H + 1)
    policy = [None] * (H + 1)
    S = np.arange(H * (K - 1) + 1)
    c0, c1 = stop_costs(H, S)
    value[H] = np.minimum(c0, c1)
    policy[H] = np.where(c1 < c0, STOP1, STOP0).astype(np.int8)
    for n in range(H - 1, 0, -1):
        S = np.arange(n * (K - 1) + 1)
        c0, c1 = stop_costs(n, S)
        q = trans(n, S)
        nxt = value[n + 1][S[:, None] + np.arange(K)[None, :]]
        cont = step_cost + np.sum(q * nxt, axis=1)
        stop = np.minimum(c0, c1)
        value[n] = np.minimum(stop, cont)
        policy[n] = np.where(stop <= cont, np.where(c1 < c0, STOP1, STOP0), CONTINUE).astype(np.int8)
    q = trans(0, np.array([0]))
    root = step_cost + float(np.sum(q[0] * value[1][np.arange(K)]))
    return value, policy, root


def propagate(lat: Lattice, policy: list, H: int) -> ExactOC:
    """Forward propagation of path mass under every measure of the lattice."""
    M, K = lat.probs.shape
    p_dec = np.zeros((M, 2))
    ess = np.zeros(M)
    mass = np.zeros((M, K))
    mass[:, :] = lat.probs
    trunc = np.zeros(M)
    for n in range(1, H + 1):
        pol = policy[n]
        for d in (STOP0, STOP1):
            hit = pol == d
            p = mass[:, hit].sum(axis=1)
            p_dec[:, d] += p
            ess += n * p
            if n == H:
                trunc += p
        if n == H:
            break
        cont = np.where(pol == CONTINUE, 1.0, 0.0)
        nxt = np.zeros((M, (n + 1) * (K - 1) + 1))
        for x in range(K):
            nxt[:, x:x + mass.shape[1]] += mass * cont * lat.probs[:, x:x + 1]
        mass = nxt
    return ExactOC(p_dec, ess, trunc)


def _check_horizon(lat: Lattice, H: int, max_horizon: int):
    limit = max_horizon // max(lat.K - 1, 1)
    if H > limit:
        raise CapacityError(f"horizon {H} exceeds the limit {limit} for a {lat.K}-letter alphabet")


def _check_binary(model: SimpleModel):
    if model.n_alt != 1:
        raise PreconditionError("the oracle handles two hypotheses")


def optimal_bayes_test(model: SimpleModel, p0: float, L0: float, L1: float, c: float, H: int,
                       max_horizon: int = MAX_HORIZON) -> DpGrid:
    """Bayes-optimal test truncated at H (at least one observation).

    Minimizes sum_i pi_i [L_i P_i(wrong decision) + c E_i T], where L0 is the
    loss of deciding 1 under H0 and L1 the loss of deciding 0 under H1.
    """
    _check_binary(model)
    if not (0 < p0 < 1) or c <= 0 or L0 <= 0 or L1 <= 0 or H < 1:
        raise PreconditionError("need 0 < p0 < 1, positive losses and cost, H >= 1")
    lat = make_lattice([model[0], model[1]])
    _check_horizon(lat, H, max_horizon)
    log_prior = math.log((1 - p0) / p0)

    def post1(n, S):
        return expit(log_prior + n * lat.alpha[1] + lat.beta[1] * S)

    def stop_costs(n, S):
        p1 = post1(n, S)
        return L1 * p1, L0 * (1 - p1)

    def trans(n, S):
        p1 = post1(n, S)[:, None]
        return (1 - p1) * lat.probs[0][None, :] + p1 * lat.probs[1][None, :]

    value, policy, root = _backward(lat, H, stop_costs, c, trans)
    grid = DpGrid(H, value, policy, root, "bayes")
    grid.oc = propagate(lat, policy, H)
    grid.meta = dict(lattice=lat, p0=p0, L0=L0, L1=L1, c=c, stop_costs=stop_costs, trans=trans, step=c)
    return grid


def optimal_kw_test(g: Distribution, f0: Distribution, f1: Distribution, v0: float, v1: float,
                    H: int, max_horizon: int = MAX_HORIZON) -> DpGrid:
    """Test minimizing E_G[T] + v0 P0(d=1) + v1 P1(d=0) over tests truncated at H."""
    if v0 < 0 or v1 < 0 or H < 1:
        raise PreconditionError("need nonnegative multipliers and H >= 1")
    lat = make_lattice([g, f0, f1])
    _check_horizon(lat, H, max_horizon)

    def stop_costs(n, S):
        lr0 = np.exp(n * lat.alpha[1] + lat.beta[1] * S)
        lr1 = np.exp(n * lat.alpha[2] + lat.beta[2] * S)
        return v1 * lr1, v0 * lr0

    def trans(n, S):
        return np.broadcast_to(lat.probs[0], (len(S), lat.K))

    value, policy, root = _backward(lat, H, stop_costs, 1.0, trans)
    grid = DpGrid(H, value, policy, root, "kiefer-weiss")
    grid.oc = propagate(lat, policy, H)
    grid.meta = dict(lattice=lat, stop_costs=stop_costs, trans=trans, step=1.0)
    return grid


def bellman_residual(grid: DpGrid) -> float:
    """Largest |V - min(stop, step + E V_next)| over all nodes, recomputed
    node by node."""
    lat, H = grid.meta["lattice"], grid.H
    stop_costs, trans, step = grid.meta["stop_costs"], grid.meta["trans"], grid.meta["step"]
    worst = 0.0
    for n in range(1, H + 1):
        for s in range(n * (lat.K - 1) + 1):
            S = np.array([s])
            c0, c1 = stop_costs(n, S)
            best = min(float(c0[0]), float(c1[0]))
            if n < H:
                q = trans(n, S)[0]
                cont = step + sum(q[x] * grid.value[n + 1][s + x] for x in range(lat.K))
                best = min(best, cont)
            worst = max(worst, abs(best - float(grid.value[n][s])))
    return worst


def bayes_risk(grid: DpGrid, policy: list) -> float:
    """Bayes risk of an arbitrary (n, S) policy under the problem in ``grid``."""
    m = grid.meta
    oc = propagate(m["lattice"], policy, grid.H)
    p0 = m["p0"]
    return (p0 * (m["L0"] * oc.p_decide[0, 1] + m["c"] * oc.ess[0])
            + (1 - p0) * (m["L1"] * oc.p_decide[1, 0] + m["c"] * oc.ess[1]))


def exhaustive_bayes_minimum(grid: DpGrid, max_rules: int = 1_000_000) -> float:
    """Minimum Bayes risk over every deterministic (n, S) rule truncated at H."""
    lat, H = grid.meta["lattice"], grid.H
    sizes = [n * (lat.K - 1) + 1 for n in range(H + 1)]
    inner = sum(sizes[1:H])
    count = 3 ** inner * 2 ** sizes[H]
    if count > max_rules:
        raise CapacityError(f"{count} rules exceed the enumeration limit {max_rules}")
    best = math.inf
    for inner_choice in itertools.product((STOP0, STOP1, CONTINUE), repeat=inner):
        for last in itertools.product((STOP0, STOP1), repeat=sizes[H]):
            policy = [None]
            k = 0
            for n in range(1, H):
                policy.append(np.array(inner_choice[k:k + sizes[n]], dtype=np.int8))
                k += sizes[n]
            policy.append(np.array(last, dtype=np.int8))
            best = min(best, bayes_risk(grid, policy))
    return best


def match_errors(g: Distribution, f0: Distribution, f1: Distribution, alpha0: float, alpha1: float,
                 H: int, rel_tol: float = 0.05, max_iter: int = 60, bracket=(-5.0, 25.0),
                 max_horizon: int = MAX_HORIZON) -> DpGrid:
    """Multipliers (v0, v1) whose optimal test has P0(d=1) and P1(d=0) within
    ``rel_tol`` of the targets, by nested bisection on log v."""
    evals = {"n": 0}

    def solve(lv0, lv1):
        evals["n"] += 1
        return optimal_kw_test(g, f0, f1, math.exp(lv0), math.exp(lv1), H, max_horizon)

    def err(grid):
        return grid.oc.p_decide[1, 1], grid.oc.p_decide[2, 0]

    def inner(lv0):
        lo, hi = bracket
        best = None
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            grid = solve(lv0, mid)
            a1 = err(grid)[1]
            if best is None or abs(a1 - alpha1) < abs(err(best)[1] - alpha1):
                best = grid
            if abs(a1 - alpha1) <= rel_tol * alpha1:
                return grid
            if a1 > alpha1:
                lo = mid
            else:
                hi = mid
        return best

    lo, hi = bracket
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        grid = inner(mid)
        a0, a1 = err(grid)
        if abs(a0 - alpha0) <= rel_tol * alpha0 and abs(a1 - alpha1) <= rel_tol * alpha1:
            grid.meta["evaluations"] = evals["n"]
            return grid
        if best is None or abs(a0 - alpha0) < abs(err(best)[0] - alpha0):
            best = grid
        if a0 > alpha0:
            lo = mid
        else:
            hi = mid
    b0, b1 = err(best)
    raise CalibrationError(f"multiplier search did not hit ({alpha0:g}, {alpha1:g}) within "
                           f"{rel_tol:.0%}; closest errors ({b0:.4g}, {b1:.4g})")


def enumerate_test(model: SimpleModel, executor: Callable, H: int,
                   max_paths: int = MAX_PATHS) -> ExactOC:
    """Exact operating characteristics of any deterministic test by enumerating
    every length-H path over a finite alphabet.

    ``executor(stream, cap)`` must return a :class:`TestOutcome`. Decisions
    outside {0, 1} (e.g. detectors that never decide) count toward neither.
    """
    alph = model.alphabet
    if alph is None:
        raise PreconditionError("path enumeration needs a finite alphabet")
    count = len(alph) ** H
    if count > max_paths:
        raise CapacityError(f"{count} paths exceed the enumeration limit {max_paths}")
    probs = np.array([h.probs for h in model.hypotheses])
    M = len(model)
    p_dec = np.zeros((M, 2))
    ess = np.zeros(M)
    trunc = np.zeros(M)
    for idx in itertools.product(range(len(alph)), repeat=H):
        out: TestOutcome = executor(iter(alph[list(idx)]), H)
        w = np.prod(probs[:, list(idx)], axis=1)
        ess += w * out.T
        if out.d in (0, 1):
            p_dec[:, out.d] += w
        if out.truncated:
            trunc += w
    return ExactOC(p_dec, ess, trunc)

"""Execution engine shared by every sequential procedure.

A :class:`Procedure` holds no per-run data. Its state lives in a dict of arrays
whose leading axis indexes independent paths, so the same code runs one
observation stream (``run_stream``) or a vectorized batch of Monte Carlo
replications (``run_paths``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import PreconditionError

CONTINUE = -1
DEFAULT_CAP = 1_000_000


@dataclass
class TestOutcome:
    """Result of running a test on one stream."""

    T: int
    d: int
    terminal_llr: float
    truncated: bool = False
    path: Optional[np.ndarray] = None

    __test__ = False  # keep pytest from collecting this class


@dataclass
class PathBatch:
    """Results of a batch of independent replications."""

    T: np.ndarray
    d: np.ndarray
    truncated: np.ndarray
    stat: np.ndarray

    def __len__(self):
        return len(self.T)

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("T", "d", "truncated", "stat")))


class Procedure:
    """Base class. Subclasses implement ``init`` and ``advance``.

    ``advance(state, x)`` consumes one observation per path (``x`` has shape
    ``(m,) + event_shape``) after the engine has incremented ``state["n"]``, and
    returns an int array of decisions with ``CONTINUE`` for paths that go on.
    """

    event_shape: tuple = ()

    def init(self, m: int) -> dict:
        raise NotImplementedError

    def initial_state(self, m: int) -> dict:
        state = self.init(m)
        state["n"] = np.zeros(m, dtype=np.int64)
        return state

    def advance(self, state: dict, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def statistic(self, state: dict) -> np.ndarray:
        return np.full(len(state["n"]), np.nan)

    def truncation_decision(self, state: dict) -> np.ndarray:
        return np.full(len(state["n"]), CONTINUE)

    def keep(self, state: dict, mask: np.ndarray) -> dict:
        return {k: v[mask] for k, v in state.items()}


def step(proc: Procedure, state: dict, x) -> np.ndarray:
    state["n"] += 1
    return proc.advance(state, x)


# ---------------------------------------------------------------------------
# Observation sources


def iid_source(dist) -> Callable:
    """Source drawing i.i.d. observations from one distribution."""

    def draw(rng, m, t0, k):
        return dist.sample(rng, (m, k))

    return draw


def change_source(pre, post, nu) -> Callable:
    """Observations 1..nu from ``pre`` and nu+1, nu+2, ... from ``post``.

    ``nu=None`` means the change never happens.
    """

    def draw(rng, m, t0, k):
        if nu is None or t0 + k <= nu:
            return pre.sample(rng, (m, k))
        if t0 >= nu:
            return post.sample(rng, (m, k))
        cut = nu - t0
        return np.concatenate([pre.sample(rng, (m, cut)), post.sample(rng, (m, k - cut))], axis=1)

    return draw


# ---------------------------------------------------------------------------
# Drivers


def run_paths(proc: Procedure, source: Callable, rng, m: int, cap: int = DEFAULT_CAP,
              chunk: int = 64) -> PathBatch:
    """Run ``m`` independent replications with observations from ``source``."""
    if cap < 1:
        raise PreconditionError("cap must be at least 1")
    T = np.full(m, cap, dtype=np.int64)
    d = np.full(m, CONTINUE, dtype=np.int64)
    trunc = np.zeros(m, dtype=bool)
    stat = np.full(m, np.nan)
    state = proc.initial_state(m)
    active = np.arange(m)
    t = 0
    while active.size and t < cap:
        k = min(chunk, cap - t)
        X = np.asarray(source(rng, active.size, t, k))
        for c in range(k):
            dec = step(proc, state, X[:, c])
            t += 1
            stopped = dec != CONTINUE
            if stopped.any():
                idx = active[stopped]
                T[idx] = t
                d[idx] = dec[stopped]
                stat[idx] = proc.statistic(state)[stopped]
                go = ~stopped
                state = proc.keep(state, go)
                X = X[go]
                active = active[go]
                if not active.size:
                    break
    if active.size:
        trunc[active] = True
        d[active] = proc.truncation_decision(state)
        stat[active] = proc.statistic(state)
    return PathBatch(T, d, trunc, stat)


def run_on_array(proc: Procedure, X: np.ndarray) -> PathBatch:
    """Run the procedure on fixed paths; paths that do not stop are truncated
    at the array length."""
    X = np.asarray(X)
    m, cap = X.shape[0], X.shape[1]

    # a single chunk covering the whole horizon, so the source is called once
    def source(rng, size, t0, k):
        return X[:, t0:t0 + k]

    return run_paths(proc, source, None, m, cap=cap, chunk=cap)


def run_stream(proc: Procedure, stream: Iterable, cap: int = DEFAULT_CAP,
               record_path: bool = False) -> TestOutcome:
    """Run a procedure on a single observation stream.

    The run is truncated at ``cap`` observations or when the stream ends.
    """
    state = proc.initial_state(1)
    path = [] if record_path else None
    n = 0
    for x in stream:
        if n >= cap:
            break
        xa = np.asarray(x, dtype=float).reshape((1,) + proc.event_shape)
        dec = step(proc, state, xa)
        n += 1
        stat = float(proc.statistic(state)[0])
        if record_path:
            path.append(stat)
        if dec[0] != CONTINUE:
            return TestOutcome(n, int(dec[0]), stat, False,
                               np.asarray(path) if record_path else None)
    if n == 0:
        raise PreconditionError("empty observation stream")
    d = int(proc.truncation_decision(state)[0])
    return TestOutcome(n, d, float(proc.statistic(state)[0]), True,
                       np.asarray(path) if record_path else None)

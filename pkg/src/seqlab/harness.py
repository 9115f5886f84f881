"""Monte Carlo harness: reproducible block seeding, optional thread parallelism,
summary estimates and stochastic threshold calibration."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .engine import DEFAULT_CAP, PathBatch, Procedure, run_paths
from .errors import CalibrationError, PreconditionError

BLOCK = 2048


@dataclass(frozen=True)
class McConfig:
    """Replication settings.

    Replications are grouped in fixed blocks of ``block`` paths; block ``k`` draws
    from a generator derived from ``(seed, k)``. Since the block layout does not
    depend on ``workers``, results are identical for any degree of parallelism.
    """

    reps: int = 10_000
    seed: int = 0
    cap: int = DEFAULT_CAP
    workers: int = 1
    block: int = BLOCK

    def __post_init__(self):
        if self.reps < 1 or self.cap < 1 or self.workers < 1 or self.block < 1:
            raise PreconditionError("reps, cap, workers and block must all be positive")


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n_effective: int
    capped_fraction: float = 0.0

    def within(self, value, k=3.0):
        return abs(self.mean - value) <= k * self.se


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for block ``index`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def mean_estimate(x, capped=None) -> Estimate:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        return Estimate(math.nan, math.nan, 0, 0.0)
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    frac = float(np.mean(capped)) if capped is not None and n else 0.0
    return Estimate(float(np.mean(x)), se, n, frac)


def proportion(flags) -> Estimate:
    flags = np.asarray(flags, dtype=float)
    n = flags.size
    p = float(flags.mean()) if n else math.nan
    return Estimate(p, math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.nan, n)


def mc_blocks(simulate: Callable, cfg: McConfig) -> list:
    """Run ``simulate(rng, m)`` over the block layout of ``cfg``; returns the
    per-block results in block order."""
    n_blocks = -(-cfg.reps // cfg.block)
    sizes = [min(cfg.block, cfg.reps - k * cfg.block) for k in range(n_blocks)]

    def work(k):
        return simulate(derive_rng(cfg.seed, k), sizes[k])

    if cfg.workers == 1 or n_blocks == 1:
        return [work(k) for k in range(n_blocks)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(work, range(n_blocks)))


def mc_run(proc: Procedure, source: Callable, cfg: McConfig) -> PathBatch:
    """Replicate a procedure ``cfg.reps`` times on observations from ``source``."""
    parts = mc_blocks(lambda rng, m: run_paths(proc, source, rng, m, cfg.cap), cfg)
    return PathBatch.concat(parts)


@dataclass(frozen=True)
class OperatingSummary:
    ess: Estimate
    p_decide: dict  # decision -> Estimate
    truncated: Estimate


def summarize(batch: PathBatch) -> OperatingSummary:
    decisions = sorted(set(batch.d.tolist()))
    return OperatingSummary(
        ess=mean_estimate(batch.T, batch.truncated),
        p_decide={int(k): proportion(batch.d == k) for k in decisions},
        truncated=proportion(batch.truncated),
    )


def calibrate_threshold(evaluate: Callable[[float], float], target: float, lo: float, hi: float,
                        rel_tol: float = 0.1, max_iter: int = 60):
    """Find a threshold whose metric is within ``rel_tol`` of ``target``.

    ``evaluate`` should use a fixed seed so repeated probes share random numbers.
    Monotonicity is checked on three probe points first. Returns
    ``(threshold, achieved)``.
    """
    if not lo < hi:
        raise PreconditionError("calibration bracket must satisfy lo < hi")
    mid = 0.5 * (lo + hi)
    f_lo, f_mid, f_hi = evaluate(lo), evaluate(mid), evaluate(hi)
    increasing = f_hi > f_lo
    if not ((f_lo <= f_mid <= f_hi) or (f_lo >= f_mid >= f_hi)) or f_lo == f_hi:
        raise CalibrationError(f"metric is not monotone on the bracket: "
                               f"f({lo})={f_lo}, f({mid})={f_mid}, f({hi})={f_hi}")
    if not (min(f_lo, f_hi) <= target <= max(f_lo, f_hi)):
        raise CalibrationError(f"target {target} outside metric range [{min(f_lo, f_hi)}, "
                               f"{max(f_lo, f_hi)}] on the bracket")
    best = min(((lo, f_lo), (mid, f_mid), (hi, f_hi)), key=lambda p: abs(p[1] - target))
    for _ in range(max_iter):
        if abs(best[1] - target) <= rel_tol * abs(target):
            return best
        x = 0.5 * (lo + hi)
        fx = evaluate(x)
        if abs(fx - target) < abs(best[1] - target):
            best = (x, fx)
        if (fx < target) == increasing:
            lo = x
        else:
            hi = x
    if abs(best[1] - target) <= rel_tol * abs(target):
        return best
    raise CalibrationError(f"calibration did not reach target {target} within {rel_tol:.0%}; "
                           f"closest threshold {best[0]} gave {best[1]}")


# ---------------------------------------------------------------------------
# CSV output


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path_or_file, header, rows):
    """Write rows with floats at 17 significant digits."""
    own = isinstance(path_or_file, str)
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    finally:
        if own:
            fh.close()


def batch_rows(batch: PathBatch, start: int = 0):
    for k in range(len(batch)):
        yield (start + k, batch.T[k], batch.d[k], batch.stat[k])

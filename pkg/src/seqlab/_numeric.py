"""Small numerical helpers shared by several modules."""
import numpy as np

from .errors import ConvergenceError


def bisect(f, lo, hi, xtol=1e-10, max_iter=200):
    """Root of a scalar function with a sign change on [lo, hi].

    Iterates until the bracket is narrower than ``xtol`` or stops shrinking
    in floating point.
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ConvergenceError(f"no sign change on [{lo}, {hi}]: f={flo}, {fhi}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo <= xtol:
            return mid
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    raise ConvergenceError(f"bisection did not converge; bracket [{lo}, {hi}]")


def bisect_increasing(f, target, lo, hi, xtol=1e-10, max_iter=200):
    """Vectorized bisection for ``f(x) = target`` with ``f`` increasing.

    ``target``, ``lo`` and ``hi`` broadcast together. Values of ``target``
    outside ``[f(lo), f(hi)]`` come back clamped to the nearer end.
    """
    target = np.asarray(target, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    below = f(lo) >= target
    above = f(hi) <= target
    a, b = lo.copy(), hi.copy()
    for _ in range(max_iter):
        if np.all(b - a <= xtol):
            break
        mid = 0.5 * (a + b)
        go_up = f(mid) < target
        a = np.where(go_up, mid, a)
        b = np.where(go_up, b, mid)
    else:
        raise ConvergenceError(f"bisection did not converge; widest bracket {np.max(b - a)}")
    out = 0.5 * (a + b)
    out = np.where(below, lo, out)
    out = np.where(above, hi, out)
    return out

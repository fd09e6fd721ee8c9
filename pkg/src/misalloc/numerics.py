"""Shared one-dimensional solvers."""

from __future__ import annotations

import math

import numpy as np

from .core import ConvergenceError, InfeasibleError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def clipped_linear_root(a, b, lo, hi, target, tol=1e-12):
    """Solve sum_i clip(a_i + b_i λ, lo_i, hi_i) = target for λ, with b_i > 0.

    The left side is nondecreasing and piecewise linear in λ with
    breakpoints where a coordinate reaches a bound, so the root is found
    exactly by locating the bracketing breakpoints and interpolating.
    Returns (λ, x) with x the clipped coordinates.
    """
    a, b, lo, hi = (np.asarray(v, float) for v in (a, b, lo, hi))
    if np.any(b <= 0):
        raise ValueError("coefficients b must be positive")
    s_lo, s_hi = lo.sum(), hi.sum()
    if target < s_lo - tol * max(1.0, abs(s_lo)) or target > s_hi + tol * max(1.0, abs(s_hi)):
        raise InfeasibleError(f"target {target} outside [{s_lo}, {s_hi}]")
    bp = np.unique(np.concatenate([(lo - a) / b, (hi - a) / b]))

    vals = _totals(a, b, lo, hi, bp)
    k = int(np.searchsorted(vals, target, side="left"))
    if k == 0:
        lam = bp[0]
    elif k >= bp.size:
        lam = bp[-1]
    else:
        l0, l1, v0, v1 = bp[k - 1], bp[k], vals[k - 1], vals[k]
        lam = l1 if v1 == v0 else l0 + (target - v0) * (l1 - l0) / (v1 - v0)
    x = np.clip(a + b * lam, lo, hi)
    # absorb rounding so the sum is as exact as floating point allows
    resid = target - x.sum()
    if resid != 0.0:
        room = (hi - x) if resid > 0 else (x - lo)
        free = (x > lo) & (x < hi)  # prefer coordinates already between bounds
        if not free.any():
            free = room > 0
        if free.any():
            w = np.where(free, room, 0.0)
            x = x + resid * w / w.sum()
            x = np.clip(x, lo, hi)
    return float(lam), x


def _totals(a, b, lo, hi, lams):
    return np.clip(a[None, :] + b[None, :] * lams[:, None], lo, hi).sum(axis=1)


def bisect_decreasing(f, lo, hi, target, xtol=1e-13, max_iter=300):
    """Bisection for a nonincreasing scalar function: returns (x_lo, x_hi).

    f(x_lo) >= target >= f(x_hi) at exit with x_hi - x_lo <= xtol·scale.
    """
    flo, fhi = f(lo), f(hi)
    if flo < target or fhi > target:
        raise ConvergenceError("bisection bracket does not contain the root")
    scale = max(1.0, abs(lo), abs(hi))
    for _ in range(max_iter):
        if hi - lo <= xtol * scale:
            return lo, hi
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            return lo, hi
        if f(mid) >= target:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError("bisection did not converge")


def golden_max(f, a, b, tol=1e-10, max_iter=200):
    """Golden-section maximization of f on [a, b]; returns (x, f(x))."""
    if b - a <= tol:
        x = 0.5 * (a + b)
        return x, f(x)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)

"""Sharp bounds on misallocation loss over a nonparametric demand class.

Each market's inverse demand passes through an anchor (q_obs, p0), has
slope in [g_L, g_U] and optionally a choke price P(0) <= M.  For a
common shadow price p the reachable quantities form an envelope
[l(p), u(p)]; the extremal loss at p is a closed form in envelope
integrals plus a separable quadratic penalty that restores adding-up.
The bounds maximize/minimize that value over the feasible p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .allocators import efficient_allocation, misallocation_loss
from .core import (
    SUM_TOL,
    ConvergenceError,
    DomainError,
    FeasibleSet,
    InfeasibleError,
    MarketSpec,
    PiecewiseAffine,
)
from .numerics import GOLDEN

P_TOL = 1e-9
GRID_PER_PIECE = 12


@dataclass(frozen=True)
class BoundsMarket:
    """One market's restrictions, in aggregate quantity units.

    ``g_lo`` is the steepest admissible slope and ``g_hi`` the flattest
    (g_lo < g_hi < 0).  ``q_max`` defaults to the quantity at which the
    flattest line through the highest anchor reaches zero price, so it
    never binds at a positive price.
    """

    q_obs: float
    p0_lo: float
    p0_hi: float
    g_lo: float
    g_hi: float
    choke: float | None = None
    q_max: float | None = None

    def __post_init__(self):
        if not self.g_lo < self.g_hi < 0:
            raise DomainError("slope bounds need g_lo < g_hi < 0")
        if not self.q_obs > 0:
            raise DomainError("q_obs must be positive")
        if self.p0_lo > self.p0_hi:
            raise DomainError("anchor interval is reversed")
        if self.choke is not None and not self.choke > self.p0_lo:
            raise DomainError("choke price must exceed the anchor price")
        qm = self.q_obs + self.p0_hi / -self.g_hi if self.q_max is None else float(self.q_max)
        if not qm > self.q_obs:
            raise DomainError("q_max must exceed q_obs")
        object.__setattr__(self, "q_max", qm)
        if self.anchor_hi < self.p0_lo - 1e-12:
            raise InfeasibleError("choke price leaves no admissible anchor")

    @property
    def alpha(self) -> float:
        return 1.0 / self.g_hi

    @property
    def beta(self) -> float:
        return 1.0 / self.g_lo

    @property
    def d(self) -> float:
        return self.beta - self.alpha

    @property
    def anchor_hi(self) -> float:
        """Upper anchor after the choke trim: the flattest line through
        the anchor must not exceed M at q = 0."""
        if self.choke is None:
            return self.p0_hi
        return min(self.p0_hi, self.choke + self.g_hi * self.q_obs)

    @property
    def anchor_lo(self) -> float:
        return min(self.p0_lo, self.anchor_hi)

    @property
    def anchor_trimmed(self) -> bool:
        return self.anchor_hi < self.p0_hi


@dataclass(frozen=True)
class BoundsProblem:
    markets: tuple
    total: float
    ceiling: float

    def __post_init__(self):
        ms = tuple(self.markets)
        if not ms:
            raise DomainError("no markets")
        s = math.fsum(m.q_obs for m in ms)
        if abs(s - self.total) > SUM_TOL:
            raise DomainError(f"observed quantities sum to {s}, not {self.total}")
        object.__setattr__(self, "markets", ms)

    @property
    def n(self) -> int:
        return len(self.markets)

    def midpoint_anchors(self) -> np.ndarray:
        return np.array([0.5 * (m.anchor_lo + m.anchor_hi) for m in self.markets])

    def with_choke(self, choke: float | None) -> "BoundsProblem":
        ms = tuple(
            BoundsMarket(m.q_obs, m.p0_lo, m.p0_hi, m.g_lo, m.g_hi, choke, m.q_max) for m in self.markets
        )
        return BoundsProblem(ms, self.total, self.ceiling)


class _Arrays:
    """Column view of a problem for vectorized evaluation."""

    def __init__(self, prob: BoundsProblem):
        ms = prob.markets
        self.total = prob.total
        self.qo = np.array([m.q_obs for m in ms])
        self.a = np.array([m.alpha for m in ms])
        self.b = np.array([m.beta for m in ms])
        self.d = self.b - self.a
        self.qmax = np.array([m.q_max for m in ms])
        self.M = np.array([math.inf if m.choke is None else m.choke for m in ms])
        self.lo = np.array([m.anchor_lo for m in ms])
        self.hi = np.array([m.anchor_hi for m in ms])


# ---------------------------------------------------------------- envelopes


def _envelope_values(A: _Arrays, p0, p):
    """l and u with p of shape (m, 1) or scalar against markets (n,)."""
    x = p - p0
    ra = A.qo + A.a * x
    rb = A.qo + A.b * x
    low = np.maximum(0.0, np.minimum(ra, rb))
    with np.errstate(invalid="ignore"):
        choke_line = np.where(np.isinf(A.M), np.inf, (A.M - p) * -A.a)
    up = np.minimum(np.minimum(A.qmax, np.maximum(ra, rb)), choke_line)
    dead = p >= A.M
    low = np.where(dead, 0.0, np.minimum(low, A.qmax))
    up = np.where(dead, 0.0, np.maximum(up, low))
    return low, up


def envelopes(m: BoundsMarket, p0: float, p: float) -> tuple[float, float]:
    """Smallest and largest quantity an admissible curve through
    (q_obs, p0) can demand at price p."""
    if not m.anchor_lo - 1e-12 <= p0 <= m.anchor_hi + 1e-12:
        raise DomainError("anchor outside the market's interval")
    A = _Arrays(BoundsProblem((m,), m.q_obs, p0))
    low, up = _envelope_values(A, np.array([p0]), p)
    return float(low[0]), float(up[0])


def _kinks(A: _Arrays, p0) -> np.ndarray:
    """Candidate kink prices of both envelopes, shape (n, 8)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = [
            p0,
            A.M,
            p0 - A.qo / A.a,
            p0 - A.qo / A.b,
            p0 + (A.qmax - A.qo) / A.a,
            p0 + (A.qmax - A.qo) / A.b,
            (A.b * p0 - A.a * A.M - A.qo) / (A.b - A.a),
            A.M + A.qmax / A.a,
        ]
    return np.column_stack(cols)


class _Envelopes:
    """Envelope values and exact integrals ∫_{p0}^{p} for fixed anchors."""

    def __init__(self, A: _Arrays, p0: np.ndarray):
        self.A = A
        self.p0 = np.asarray(p0, float)
        k = _kinks(A, self.p0)
        span_lo = np.min(self.p0 - A.total / -A.b) - 1.0
        span_hi = np.max(self.p0 + A.qo / -A.b) + 1.0
        if np.isfinite(A.M).any():
            span_hi = max(span_hi, float(np.max(A.M[np.isfinite(A.M)])) + 1.0)
        self.span = (span_lo, span_hi)
        n = A.qo.size
        rows = []
        for i in range(n):
            ki = k[i][np.isfinite(k[i])]
            ki = ki[(ki > span_lo) & (ki < span_hi)]
            rows.append(np.unique(np.concatenate([[span_lo, span_hi], ki])))
        width = max(r.size for r in rows)
        xs = np.empty((n, width))
        for i, r in enumerate(rows):
            xs[i, : r.size] = r
            xs[i, r.size :] = span_hi + np.arange(1, width - r.size + 1)  # padding past the span
        self.xs = xs
        low, up = _envelope_values(A, self.p0, xs.T)
        low, up = low.T, up.T
        dx = np.diff(xs, axis=1)
        self.vl, self.vu = low, up
        self.cl = np.concatenate([np.zeros((n, 1)), np.cumsum(0.5 * (low[:, 1:] + low[:, :-1]) * dx, axis=1)], axis=1)
        self.cu = np.concatenate([np.zeros((n, 1)), np.cumsum(0.5 * (up[:, 1:] + up[:, :-1]) * dx, axis=1)], axis=1)
        self.offset = np.arange(n) * (span_hi - span_lo + width + 10.0)
        self.flat = (xs + self.offset[:, None]).ravel()
        self.kink_set = np.unique(np.concatenate(rows))
        base = self._antideriv(self.p0[None, :])
        self.base_l, self.base_u = base[0][0], base[1][0]

    def values(self, p):
        return _envelope_values(self.A, self.p0, p)

    def _antideriv(self, p):
        """Integrals from the span start to p, for p of shape (m, n)."""
        n = self.p0.size
        w = self.xs.shape[1]
        pos = np.searchsorted(self.flat, (p + self.offset[None, :]).ravel(), side="right") - 1
        pos = pos.reshape(p.shape)
        j = np.clip(pos - np.arange(n)[None, :] * w, 0, w - 2)
        rows = np.broadcast_to(np.arange(n)[None, :], p.shape)
        x0 = self.xs[rows, j]
        low, up = _envelope_values(self.A, self.p0, p)
        il = self.cl[rows, j] + 0.5 * (self.vl[rows, j] + low) * (p - x0)
        iu = self.cu[rows, j] + 0.5 * (self.vu[rows, j] + up) * (p - x0)
        return il, iu, low, up

    def integrals(self, p):
        """(∫_{p0}^{p} l, ∫_{p0}^{p} u, l(p), u(p)) with p of shape (m, 1)."""
        pm = np.broadcast_to(p, (p.shape[0], self.p0.size))
        il, iu, low, up = self._antideriv(pm)
        return il - self.base_l, iu - self.base_u, low, up


# ------------------------------------------------------------ interval I


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float


def _interval(env: _Envelopes) -> Interval:
    A = env.A
    xs = env.kink_set
    low, up = env.values(xs[:, None])
    L, U = low.sum(axis=1), up.sum(axis=1)
    Q = A.total
    tol = SUM_TOL * max(1.0, Q)
    # L and U are nonincreasing piecewise-linear functions of p
    if not (L <= Q + tol).any() or not (U >= Q - tol).any():
        raise InfeasibleError("candidate shadow-price set is empty")
    k = int(np.argmax(L <= Q))
    if L[k] > Q or k == 0:
        p_lo = xs[k]
    else:
        p_lo = xs[k - 1] + (L[k - 1] - Q) / (L[k - 1] - L[k]) * (xs[k] - xs[k - 1])
    above = np.flatnonzero(U >= Q)
    j = int(above[-1]) if above.size else 0
    if j == xs.size - 1 or U[j] < Q:
        p_hi = xs[j]
    else:
        p_hi = xs[j] + (U[j] - Q) / (U[j] - U[j + 1]) * (xs[j + 1] - xs[j])
    if p_lo > p_hi + 1e-12 * max(1.0, abs(p_hi)):
        raise InfeasibleError("candidate shadow-price set is empty")
    return Interval(float(p_lo), float(max(p_hi, p_lo)))


def candidate_interval(prob: BoundsProblem, anchors) -> list[Interval]:
    """Shadow prices at which adding-up is attainable.

    Both envelope sums are nonincreasing in p, so the set is always a
    single closed interval; it is returned as a one-element list of
    components to keep the signature general.
    """
    A = _Arrays(prob)
    anchors = _check_anchors(A, anchors)
    return [_interval(_Envelopes(A, anchors))]


def _check_anchors(A: _Arrays, anchors) -> np.ndarray:
    anchors = np.asarray(anchors, float).reshape(-1)
    if anchors.size != A.qo.size:
        raise DomainError("one anchor per market required")
    if np.any(anchors < A.lo - 1e-12) or np.any(anchors > A.hi + 1e-12):
        raise DomainError("anchor outside its admissible interval")
    return np.clip(anchors, A.lo, A.hi)


# --------------------------------------------------------- triangle penalty


def _penalty_rows(d, cap, mass):
    """Row-wise min Σ δ²/(2d) s.t. Σδ = mass, 0 <= δ <= cap.

    d, cap have shape (m, n) with cap = 0 for inactive markets; mass (m,).
    δᵢ = min(λ dᵢ, capᵢ) and λ solves a piecewise-linear equation whose
    breakpoints are capᵢ/dᵢ.
    """
    t = cap / d
    order = np.argsort(t, axis=1)
    ts = np.take_along_axis(t, order, axis=1)
    cs = np.take_along_axis(cap, order, axis=1)
    ds = np.take_along_axis(d, order, axis=1)
    cum_c = np.cumsum(cs, axis=1)
    suf_d = np.cumsum(ds[:, ::-1], axis=1)[:, ::-1]
    after = suf_d - ds
    S = cum_c + ts * after
    reach = S >= mass[:, None]
    k = np.where(reach.any(axis=1), np.argmax(reach, axis=1), t.shape[1] - 1)
    rows = np.arange(t.shape[0])
    before = np.where(k > 0, cum_c[rows, np.maximum(k - 1, 0)], 0.0)
    lam = (mass - before) / suf_d[rows, k]
    lam = np.maximum(lam, 0.0)
    delta = np.minimum(lam[:, None] * d, cap)
    psi = np.sum(delta * delta / (2.0 * d), axis=1)
    return psi, delta


def triangle_penalty(d: Sequence[float], caps: Sequence[float], mass: float):
    """Cheapest way to shift ``mass`` across markets when moving δᵢ costs
    δᵢ²/(2dᵢ); returns (Ψ, δ)."""
    d = np.asarray(d, float)
    caps = np.asarray(caps, float)
    if np.any(d <= 0):
        raise DomainError("d must be positive")
    if mass < -SUM_TOL or mass > caps.sum() + SUM_TOL:
        raise InfeasibleError("mass exceeds total capacity")
    if mass <= 0:
        return 0.0, np.zeros_like(d)
    psi, delta = _penalty_rows(d[None, :], caps[None, :], np.array([min(mass, caps.sum())]))
    return float(psi[0]), delta[0]


# ------------------------------------------------------ conditional value


@dataclass(frozen=True)
class ConditionalValue:
    value: float
    endpoints: np.ndarray
    delta: np.ndarray
    excess: float
    psi: float


def _conditional(env: _Envelopes, p, side: str):
    """Vectorized conditional extremal loss at prices p (shape (m,))."""
    A = env.A
    p = np.asarray(p, float).reshape(-1, 1)
    il, iu, low, up = env.integrals(p)
    above = p >= env.p0
    if side == "upper":
        base = np.where(above, low, up)
        integ = np.where(above, il, iu)
    else:
        base = np.where(above, up, low)
        integ = np.where(above, iu, il)
    excess = A.total - base.sum(axis=1)
    grow = excess > 0
    # markets sitting on the lower envelope may grow, those on the upper may shrink
    at_low = above if side == "upper" else ~above
    active = np.where(grow[:, None], at_low, ~at_low)
    cap = np.where(active, up - low, 0.0)
    mass = np.minimum(np.abs(excess), cap.sum(axis=1))
    dd = np.broadcast_to(A.d, cap.shape)
    psi, delta = _penalty_rows(dd, cap, mass)
    const = A.total * p[:, 0] - np.dot(A.qo, env.p0)
    value = const - integ.sum(axis=1) + (-psi if side == "upper" else psi)
    endpoints = base + np.sign(excess)[:, None] * delta
    return value, endpoints, delta, excess, psi


def conditional_bound(prob: BoundsProblem, anchors, p: float, side: str = "upper") -> ConditionalValue:
    """Extremal loss among admissible profiles whose efficient shadow
    price equals p."""
    _check_side(side)
    A = _Arrays(prob)
    env = _Envelopes(A, _check_anchors(A, anchors))
    I = _interval(env)
    if not I.lo - P_TOL <= p <= I.hi + P_TOL:
        raise DomainError(f"p={p} outside the candidate interval [{I.lo}, {I.hi}]")
    v, e, dl, ex, ps = _conditional(env, np.array([p]), side)
    return ConditionalValue(float(v[0]), e[0], dl[0], float(ex[0]), float(ps[0]))


def _check_side(side):
    if side not in ("upper", "lower"):
        raise DomainError("side must be 'upper' or 'lower'")


# ---------------------------------------------------------- outer search


@dataclass
class _Solve:
    value: float
    p: float
    anchors: np.ndarray
    endpoints: np.ndarray
    delta: np.ndarray
    interval: Interval


def _outer(env: _Envelopes, side: str, tol: float = P_TOL, brackets: int = 3) -> _Solve:
    """Global 1-D extremum over the candidate interval: dense sampling of
    every piece between breakpoints, then golden-section refinement of
    the best few brackets to |Δp| <= tol."""
    I = _interval(env)
    sign = 1.0 if side == "upper" else -1.0
    if I.hi - I.lo <= P_TOL:
        p = np.array([0.5 * (I.lo + I.hi)])
        v, e, dl, _, _ = _conditional(env, p, side)
        return _Solve(float(v[0]), float(p[0]), env.p0, e[0], dl[0], I)
    ks = env.kink_set
    bps = np.unique(np.concatenate([[I.lo, I.hi], ks[(ks > I.lo) & (ks < I.hi)]]))
    frac = np.linspace(0.0, 1.0, GRID_PER_PIECE + 1)[:-1]
    grid = (bps[:-1, None] + frac[None, :] * np.diff(bps)[:, None]).ravel()
    grid = np.concatenate([grid, [I.hi]])
    vals = sign * _conditional(env, grid, side)[0]
    # refine around the best few local maxima of the sampled values
    order = np.argsort(-vals)
    picks: list[int] = []
    for i in order:
        if all(abs(i - j) > 1 for j in picks):
            picks.append(int(i))
        if len(picks) == brackets:
            break
    a = np.array([grid[max(i - 1, 0)] for i in picks])
    b = np.array([grid[min(i + 1, grid.size - 1)] for i in picks])
    best_p, best_v = grid[picks[0]], vals[picks[0]]

    def f(x):
        return sign * _conditional(env, x, side)[0]

    c = b - GOLDEN * (b - a)
    dpt = a + GOLDEN * (b - a)
    fc, fd = f(c), f(dpt)
    for _ in range(200):
        if np.max(b - a) <= tol:
            break
        left = fc >= fd
        b = np.where(left, dpt, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - GOLDEN * (b - a), dpt)
        new_d = np.where(left, c, a + GOLDEN * (b - a))
        fnew = f(np.where(left, new_c, new_d))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, dpt = new_c, new_d
    else:
        raise ConvergenceError("golden-section search did not converge")
    cand_p = np.concatenate([[best_p], c, dpt])
    cand_v = np.concatenate([[best_v], fc, fd])
    i = int(np.argmax(cand_v))
    p = np.array([cand_p[i]])
    v, e, dl, _, _ = _conditional(env, p, side)
    return _Solve(float(v[0]), float(p[0]), env.p0.copy(), e[0], dl[0], I)


def _solve_fixed(A: _Arrays, anchors, side, coarse: bool = False) -> _Solve:
    if coarse:  # screening pass inside the anchor search
        return _outer(_Envelopes(A, anchors), side, tol=1e-7, brackets=1)
    return _outer(_Envelopes(A, anchors), side)


# ------------------------------------------------------ anchor search


def _corner(A: _Arrays, p, side) -> np.ndarray:
    """Anchor corner that widens the bound given the current shadow price.

    Upper side: lowest anchor where p is at or above it, highest anchor
    otherwise.  Lower side: the reverse."""
    above = p >= A.lo
    if side == "upper":
        return np.where(above, A.lo, A.hi)
    return np.where(p >= A.hi, A.hi, np.where(p <= A.lo, A.lo, np.clip(p, A.lo, A.hi)))


def _better(new: _Solve, old: _Solve, side) -> bool:
    gap = 1e-12 * max(1.0, abs(old.value))
    return new.value > old.value + gap if side == "upper" else new.value < old.value - gap


def _interior_markets(A: _Arrays, sol: _Solve) -> np.ndarray:
    return ~_violations(A, sol).any(axis=1)


def _coordinate_search(A, start, free, side) -> _Solve:
    cur = _solve_fixed(A, start, side, coarse=True)
    for _ in range(20):
        improved = False
        for i in np.flatnonzero(free):
            cands = [A.lo[i], A.hi[i]]
            if side == "lower":
                cands.append(min(max(cur.p, A.lo[i]), A.hi[i]))
            for c in cands:
                if abs(c - cur.anchors[i]) <= 1e-15:
                    continue
                trial = cur.anchors.copy()
                trial[i] = c
                try:
                    sol = _solve_fixed(A, trial, side, coarse=True)
                except InfeasibleError:
                    continue
                if _better(sol, cur, side):
                    cur, improved = sol, True
        if not improved:
            break
    return cur


def _search_anchors(A: _Arrays, side: str, restarts: int, seed: int) -> tuple[_Solve, np.ndarray]:
    anchors = 0.5 * (A.lo + A.hi)
    sol = _solve_fixed(A, anchors, side)
    for _ in range(5):
        nxt = _corner(A, sol.p, side)
        if np.array_equal(nxt, sol.anchors):
            break
        sol = _solve_fixed(A, nxt, side)
    # the corner rule is exact for markets priced at or above their
    # anchor interval whose envelopes stay interior
    locked = (sol.p >= A.hi if side == "lower" else sol.p >= A.lo) & _interior_markets(A, sol)
    free = (A.hi > A.lo) & ~locked
    best = _coordinate_search(A, sol.anchors, free, side)
    rng = np.random.default_rng(seed)
    for _ in range(restarts if free.any() else 0):
        start = best.anchors.copy()
        pick = rng.integers(0, 2, size=A.lo.size).astype(bool)
        start[free] = np.where(pick, A.lo, A.hi)[free]
        try:
            sol = _coordinate_search(A, start, free, side)
        except InfeasibleError:
            continue
        if _better(sol, best, side):
            best = sol
    # the corner rule holds at a fixed shadow price only; a last pass lets
    # locked markets move when that shifts the optimum
    if locked.any():
        best = _coordinate_search(A, best.anchors, A.hi > A.lo, side)
    final = _solve_fixed(A, best.anchors, side)
    return final, locked & (final.anchors == _corner(A, final.p, side))


# ------------------------------------------------------------ diagnostics


def _violations(A: _Arrays, sol: _Solve) -> np.ndarray:
    """Per market: does a clipped envelope differ from its two-line form
    on the traversed price range?  Columns: zero, q_max, choke."""
    p0, p = sol.anchors, sol.p
    lo_p, hi_p = np.minimum(p0, p), np.maximum(p0, p)
    pts = np.stack([lo_p, hi_p, 0.5 * (lo_p + hi_p)])
    x = pts - p0
    ra, rb = A.qo + A.a * x, A.qo + A.b * x
    low_raw, up_raw = np.minimum(ra, rb), np.maximum(ra, rb)
    with np.errstate(invalid="ignore"):
        choke_line = np.where(np.isinf(A.M), np.inf, (A.M - pts) * -A.a)
    tol = 1e-12
    zero = (low_raw < -tol).any(axis=0)
    qmax = (up_raw > A.qmax + tol).any(axis=0) | (low_raw > A.qmax + tol).any(axis=0)
    choke = (up_raw > choke_line + tol).any(axis=0) | (pts >= A.M).any(axis=0)
    return np.column_stack([zero, qmax, choke])


# --------------------------------------------------------- extremal curves


def construct_extremal(m: BoundsMarket, p0: float, p_star: float, delta: float, side: str) -> PiecewiseAffine:
    """Bang-bang inverse demand attaining the conditional extremum.

    The quantity path leaves the anchor along one slope and switches to
    the other for the last h = δ/d of the price move; outside the
    traversed range it continues at the flattest slope.
    """
    _check_side(side)
    a, b, d = m.alpha, m.beta, m.d
    span = abs(p_star - p0)
    h = delta / d
    if delta < -SUM_TOL or h > span * (1 + 1e-9) + 1e-12:
        raise InfeasibleError("kink offset exceeds the price move")
    h = min(max(h, 0.0), span)
    first, last = (a, b) if side == "upper" else (b, a)
    direction = 1.0 if p_star >= p0 else -1.0
    s1 = p_star - direction * h
    q1 = m.q_obs + first * (s1 - p0)
    q2 = q1 + last * (p_star - s1)
    pts = [(m.q_obs, p0), (q1, s1), (q2, p_star)]
    top_q, top_p = min(pts)  # smallest quantity has the highest price
    bot_q, bot_p = max(pts)
    knots = list(pts)
    if top_q > 0:
        p_zero = top_p - top_q / a
        if m.choke is not None and p_zero > m.choke:
            p_zero = m.choke
        knots.append((0.0, p_zero))
    if bot_q < m.q_max:
        q_end = min(m.q_max, bot_q - bot_p * a)  # flat continuation to zero price
        knots.append((q_end, bot_p + (q_end - bot_q) / a))
    knots.sort()
    clean: list[tuple[float, float]] = []
    for q, pr in knots:
        if q < 0 or q > m.q_max:
            continue
        if clean and q - clean[-1][0] <= 1e-14 * max(1.0, q):
            continue
        clean.append((q, pr))
    if clean[0][0] > 0:
        clean.insert(0, (0.0, clean[0][1] - clean[0][0] / a))
    return PiecewiseAffine(tuple(clean))


def profile_loss(curves: Sequence, q_obs: Sequence[float]) -> float:
    """Misallocation loss of an observed allocation under given demands:
    efficient reallocation over each curve's full domain."""
    q_obs = np.asarray(q_obs, float)
    markets = [MarketSpec(c) for c in curves]
    fs = FeasibleSet([c.q_max for c in curves], math.fsum(q_obs))
    alloc, _ = efficient_allocation(markets, fs)
    return misallocation_loss(markets, fs, q_obs, alloc)


def admissible_sampler(m: BoundsMarket, p0: float, rng_seed) -> PiecewiseAffine:
    """Random admissible curve through (q_obs, p0) with 1-6 segments."""
    rng = np.random.default_rng(rng_seed)
    k = int(rng.integers(1, 7))
    cuts = np.sort(rng.uniform(0.0, m.q_max, size=k - 1))
    qs = np.unique(np.concatenate([[0.0, m.q_max, m.q_obs], cuts]))
    seg_slope = rng.uniform(m.g_lo, m.g_hi, size=k)
    # slope of each elementary interval = slope of the segment it falls in
    mids = 0.5 * (qs[1:] + qs[:-1])
    slopes = seg_slope[np.searchsorted(cuts, mids)]
    i0 = int(np.flatnonzero(qs == m.q_obs)[0])
    left, right = slopes[:i0], slopes[i0:]
    dq = np.diff(qs)
    if m.choke is not None:
        rise = -np.dot(left, dq[:i0])
        room = m.choke - p0
        flat_rise = -m.g_hi * m.q_obs
        if rise > room:
            theta = (room - flat_rise) / (rise - flat_rise) if rise > flat_rise else 0.0
            left = m.g_hi + max(theta, 0.0) * (left - m.g_hi)
    prices = np.empty(qs.size)
    prices[i0] = p0
    for j in range(i0 - 1, -1, -1):
        prices[j] = prices[j + 1] - left[j] * dq[j]
    for j in range(i0, qs.size - 1):
        prices[j + 1] = prices[j] + right[j - i0] * dq[j]
    neg = np.flatnonzero(prices < 0)
    if neg.size:  # the curve reaches zero price before q_max: end it there
        j = int(neg[0])
        q_zero = qs[j - 1] + prices[j - 1] * (qs[j] - qs[j - 1]) / (prices[j - 1] - prices[j])
        qs = np.concatenate([qs[:j], [q_zero]])
        prices = np.concatenate([prices[:j], [0.0]])
    return PiecewiseAffine(tuple(zip(qs, prices)))


# ------------------------------------------------------------------ solve


@dataclass(frozen=True)
class BoundsResult:
    phi_lower: float
    phi_upper: float
    p_star_lower: float
    p_star_upper: float
    anchors_lower: np.ndarray
    anchors_upper: np.ndarray
    endpoints_lower: np.ndarray
    endpoints_upper: np.ndarray
    extremal_lower: tuple
    extremal_upper: tuple
    interval_I: tuple
    diagnostics: dict = field(default_factory=dict)


def solve_bounds(
    prob: BoundsProblem,
    anchor_mode: str = "fixed",
    anchors=None,
    restarts: int = 5,
    seed: int = 0,
) -> BoundsResult:
    """Lower and upper misallocation-loss bounds with attaining demands.

    ``fixed`` uses the given anchors (interval midpoints by default);
    ``interval`` also searches over each market's anchor interval.
    """
    if anchor_mode not in ("fixed", "interval"):
        raise DomainError("anchor_mode must be 'fixed' or 'interval'")
    A = _Arrays(prob)
    sols = {}
    locked = {}
    for side in ("lower", "upper"):
        if anchor_mode == "fixed":
            a0 = prob.midpoint_anchors() if anchors is None else _check_anchors(A, anchors)
            sols[side] = _solve_fixed(A, a0, side)
            locked[side] = np.zeros(prob.n, bool)
        else:
            sols[side], locked[side] = _search_anchors(A, side, restarts, seed)
    lo, up = sols["lower"], sols["upper"]
    if lo.value > up.value + 1e-9 * max(1.0, abs(up.value)):
        raise ConvergenceError("lower bound exceeds upper bound")
    extremal = {}
    diag = {"anchor_mode": anchor_mode}
    for side, sol in sols.items():
        extremal[side] = tuple(
            construct_extremal(m, sol.anchors[i], sol.p, sol.delta[i], side) for i, m in enumerate(prob.markets)
        )
        viol = _violations(A, sol)
        diag[side] = {
            "interval": [sol.interval.lo, sol.interval.hi],
            "envelope_hits_zero": np.flatnonzero(viol[:, 0]).tolist(),
            "envelope_hits_q_max": np.flatnonzero(viol[:, 1]).tolist(),
            "choke_binds": np.flatnonzero(viol[:, 2]).tolist(),
            "anchor_trimmed_by_choke": [i for i, m in enumerate(prob.markets) if m.anchor_trimmed],
            "corner_rule_markets": np.flatnonzero(locked[side]).tolist(),
        }
    diag["conservative"] = bool(
        any(diag[s][k] for s in ("lower", "upper") for k in ("envelope_hits_zero", "envelope_hits_q_max", "choke_binds"))
    )
    return BoundsResult(
        phi_lower=lo.value,
        phi_upper=up.value,
        p_star_lower=lo.p,
        p_star_upper=up.p,
        anchors_lower=lo.anchors,
        anchors_upper=up.anchors,
        endpoints_lower=lo.endpoints,
        endpoints_upper=up.endpoints,
        extremal_lower=extremal["lower"],
        extremal_upper=extremal["upper"],
        interval_I=(up.interval.lo, up.interval.hi),
        diagnostics=diag,
    )

"""Efficient, worst-case and cost-minimizing allocations of a fixed supply."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    SUM_TOL,
    Allocation,
    ConvergenceError,
    DegenerateError,
    DemandCurve,
    DomainError,
    FeasibleSet,
    InfeasibleError,
    LinearAnchored,
    MarketSpec,
    PiecewiseAffine,
    TieError,
)
from .numerics import bisect_decreasing

KKT_TOL = 1e-8
TIE_TOL = 1e-12
EXACT_WORST_MAX_N = 20
ORACLE_MAX_N = 12


@dataclass(frozen=True)
class WelfareReport:
    gross_surplus: float
    net_surplus: float
    shadow_price: float | None
    misallocation_loss: float
    harberger_loss: float | None
    ratio: float | None

    def __post_init__(self):
        if self.misallocation_loss < -SUM_TOL:
            raise ValueError("negative misallocation loss")


def _as_markets(markets) -> list[MarketSpec]:
    out = []
    for m in markets:
        out.append(m if isinstance(m, MarketSpec) else MarketSpec(m))
    return out


def _effective_caps(markets: Sequence[MarketSpec], fs: FeasibleSet) -> np.ndarray:
    if len(markets) != fs.n:
        raise InfeasibleError("number of markets does not match the feasible set")
    caps = np.minimum(fs.caps, [m.q_max for m in markets])
    if caps.sum() <= fs.total:
        raise InfeasibleError("demand domains cannot absorb the supply")
    return caps


def _vertex_fill(caps: np.ndarray, total: float, order: Sequence[int]) -> np.ndarray:
    """Fill markets to cap in ``order``.

    The cutoff is the first market whose cap reaches the exactly rounded
    remaining supply, so every code path yields bit-identical vertices.
    """
    order = np.asarray(order, dtype=int)
    c = caps[order]

    def rem(k):  # supply left after filling the first k markets
        return math.fsum([total, *(-c[:k])])

    k = int(np.searchsorted(np.cumsum(c), total, side="left"))
    k = min(max(k, 0), c.size - 1)
    while k > 0 and rem(k) <= 0.0:
        k -= 1
    while k < c.size - 1 and c[k] < rem(k):
        k += 1
    q = np.zeros(caps.size)
    q[order[:k]] = c[:k]
    q[order[k]] = min(rem(k), c[k])
    return q


# ---------------------------------------------------------------- efficient


def _pwl_quantity_table(curve: DemandCurve):
    """Price-ascending table of the inverse when it is piecewise linear and
    strictly decreasing, else None."""
    if isinstance(curve, LinearAnchored):
        return np.array([curve.price(curve.q_max), curve.intercept]), np.array([curve.q_max, 0.0])
    if isinstance(curve, PiecewiseAffine):
        if np.any(curve.slopes >= 0):
            return None
        return curve._p[::-1].copy(), curve._q[::-1].copy()
    return None


def _efficient_pwl(tables, caps, total, lo_price):
    bps = np.unique(np.concatenate([[lo_price], *(ps for ps, _ in tables)]))

    def supply(p):
        p = np.atleast_1d(p)
        out = np.zeros(p.shape)
        for (ps, qs), cap in zip(tables, caps):
            out += np.minimum(np.interp(p, ps, qs), cap)
        return out

    # add prices where a market reaches its cap
    extra = [float(np.interp(-cap, -qs, ps)) for (ps, qs), cap in zip(tables, caps) if cap < qs[0]]
    bps = np.unique(np.concatenate([bps, extra]))
    bps = bps[bps >= lo_price]
    vals = supply(bps)
    if vals[0] < total:
        raise InfeasibleError("ceiling is not binding: demand at the floor price is below supply")
    # vals is nonincreasing; first index where vals <= total
    k = int(np.argmax(vals <= total))
    if vals[k] > total:
        raise ConvergenceError("aggregate demand never falls to the supply")
    if k == 0 or vals[k] == total:
        p = bps[k]
    else:
        p0, p1, v0, v1 = bps[k - 1], bps[k], vals[k - 1], vals[k]
        p = p0 + (total - v0) * (p1 - p0) / (v1 - v0)
    q = np.array([min(float(np.interp(p, ps, qs)), cap) for (ps, qs), cap in zip(tables, caps)])
    return float(p), q


def efficient_allocation(markets, fs: FeasibleSet, p_bar: float | None = None):
    """Shadow-price equalizing allocation: returns (Allocation, p*).

    Bisection on the common price p of the clamped inverses qᵢ(p); mass
    left over at a flat demand segment goes to the markets whose
    quantity jumps at p*.  Piecewise-linear strictly decreasing demands
    take an exact breakpoint path instead.
    """
    markets = _as_markets(markets)
    caps = _effective_caps(markets, fs)
    curves = [m.demand for m in markets]
    floor = p_bar if p_bar is not None else min(c.price(cap) for c, cap in zip(curves, caps))
    top = max(c.price(0.0) for c in curves)

    tables = [_pwl_quantity_table(c) for c in curves]
    if all(t is not None for t in tables):
        p_star, q = _efficient_pwl(tables, caps, fs.total, floor)
    else:

        def qvec(p):
            return np.array([min(c.quantity(p), cap) for c, cap in zip(curves, caps)])

        def supply(p):
            return math.fsum(qvec(p))

        if supply(floor) < fs.total:
            raise InfeasibleError("ceiling is not binding: demand at the floor price is below supply")
        if top <= floor:
            top = floor
        p_lo, p_hi = bisect_decreasing(supply, floor, top, fs.total)
        q_hi, q_lo = qvec(p_hi), qvec(p_lo)
        jump = np.maximum(q_lo - q_hi, 0.0)
        resid = fs.total - math.fsum(q_hi)
        q = q_hi + (resid * jump / jump.sum() if jump.sum() > 0 else 0.0)
        p_star = 0.5 * (p_lo + p_hi)
    q = _repair_sum(q, caps, fs.total)
    alloc = Allocation.build(q, fs)
    resid = efficient_kkt_residual(markets, alloc, p_star, caps)
    if resid > KKT_TOL:
        raise ConvergenceError(f"efficient allocation KKT residual {resid:.3g}")
    return alloc, p_star


def _repair_sum(q, caps, total):
    q = np.clip(q, 0.0, caps)
    resid = total - math.fsum(q)
    if resid != 0.0:
        room = caps - q if resid > 0 else q
        if room.sum() > 0:
            q = np.clip(q + resid * room / room.sum(), 0.0, caps)
    return q


def efficient_kkt_residual(markets, alloc: Allocation, p_star: float, caps=None) -> float:
    """Largest violation of the shadow-price equalization conditions."""
    markets = _as_markets(markets)
    caps = np.array([m.q_max for m in markets]) if caps is None else caps
    worst = 0.0
    for m, qi, cap in zip(markets, alloc.quantities, caps):
        P = m.demand
        if qi <= SUM_TOL:
            worst = max(worst, P.price(0.0) - p_star)
        elif qi >= cap - SUM_TOL:
            worst = max(worst, p_star - P.price(min(cap, P.q_max)))
        else:
            worst = max(worst, _interior_gap(P, qi, p_star))
    return worst


def _interior_gap(P: DemandCurve, q: float, p: float) -> float:
    # at a kink or flat step p may lie anywhere between the one-sided limits
    eps = 1e-12 * max(1.0, q)
    hi = P.price(max(q - eps, 0.0))
    lo = P.price(min(q + eps, P.q_max))
    if lo - 1e-12 <= p <= hi + 1e-12:
        return 0.0
    return abs(P.price(q) - p)


# ------------------------------------------------------------------- greedy


def greedy_controlled_allocation(markets, fs: FeasibleSet, tie_break: str = "error", check_degenerate: bool = True):
    """Fill markets to cap in increasing order of unit cost.

    ``markets`` may be MarketSpecs or a plain cost vector.  Costs within
    1e-12 of each other raise TieError unless ``tie_break='index'``.
    """
    costs = _costs(markets)
    if costs.size != fs.n:
        raise InfeasibleError("cost vector length does not match the feasible set")
    if tie_break not in ("error", "index"):
        raise DomainError("tie_break must be 'error' or 'index'")
    order = np.argsort(costs, kind="stable")
    if tie_break == "error" and np.any(np.diff(costs[order]) <= TIE_TOL):
        raise TieError("two markets have equal unit costs")
    if check_degenerate:
        prefix = np.cumsum(fs.caps[order])[:-1]
        if np.any(np.abs(prefix - fs.total) <= TIE_TOL):
            raise DegenerateError("supply equals a sum of caps; the cutoff market is not unique")
    q = _vertex_fill(fs.caps, fs.total, order)
    return Allocation.build(q, fs)


def _costs(markets) -> np.ndarray:
    if isinstance(markets, np.ndarray) or (len(markets) and not isinstance(markets[0], MarketSpec)):
        return np.asarray(markets, dtype=float)
    return np.array([m.unit_cost for m in markets], dtype=float)


def lp_vertex_oracle(costs, fs: FeasibleSet) -> Allocation:
    """Cheapest vertex of the polytope by exhaustive enumeration (n <= 12)."""
    costs = np.asarray(costs, dtype=float)
    n = fs.n
    if n > ORACLE_MAX_N:
        raise DomainError(f"oracle limited to n <= {ORACLE_MAX_N}")
    best, best_key = None, None
    for size in range(n + 1):
        for full in itertools.combinations(range(n), size):
            rem = math.fsum([fs.total, *(-fs.caps[j] for j in full)])
            if rem < 0:
                continue
            rest = [k for k in range(n) if k not in full]
            for k in rest or [None]:
                if k is None:
                    if rem != 0:
                        continue
                elif rem > fs.caps[k]:
                    continue
                q = np.zeros(n)
                q[list(full)] = fs.caps[list(full)]
                if k is not None:
                    q[k] = rem
                key = math.fsum(costs * q)
                if best_key is None or key < best_key:
                    best, best_key = q, key
    if best is None:
        raise InfeasibleError("no vertex found")
    return Allocation.build(best, fs)


# ---------------------------------------------------------------- worst case


def _cum_surplus(curve: DemandCurve, q) -> np.ndarray:
    q = np.asarray(q, float)
    return curve.antiderivative(np.minimum(q, curve.q_max))


def worst_case_allocation(markets, fs: FeasibleSet):
    """Gross-surplus minimizing vertex and its cutoff price λ.

    Exact enumeration for n <= 20; beyond that a greedy-by-average-value
    start improved by pairwise swaps (heuristic, no global guarantee).
    """
    markets = _as_markets(markets)
    caps = _effective_caps(markets, fs)
    fs_eff = FeasibleSet(caps, fs.total)
    if fs.n <= EXACT_WORST_MAX_N:
        q = _worst_exact(markets, fs_eff)
    else:
        q = _worst_heuristic(markets, fs_eff)
    alloc = Allocation.build(q, fs)
    lam = worst_cutoff(markets, alloc, caps)
    return alloc, lam


def _worst_exact(markets, fs: FeasibleSet) -> np.ndarray:
    n, caps, total = fs.n, fs.caps, fs.total
    full_val = np.array([float(_cum_surplus(m.demand, c)) for m, c in zip(markets, caps)])
    sums = np.zeros(1)
    vals = np.zeros(1)
    for j in range(n):
        sums = np.concatenate([sums, sums + caps[j]])
        vals = np.concatenate([vals, vals + full_val[j]])
    idx = np.arange(sums.size)
    slack = SUM_TOL
    ok = sums <= total + slack
    best_val, best = math.inf, None
    for k in range(n):
        free = ok & ((idx >> k) & 1 == 0)
        rem = total - sums
        sel = free & (rem <= caps[k] + slack)
        if not sel.any():
            continue
        r = np.clip(rem[sel], 0.0, caps[k])
        v = vals[sel] + _cum_surplus(markets[k].demand, r)
        i = int(np.argmin(v))
        if v[i] < best_val - 1e-15:
            best_val = v[i]
            best = (int(idx[sel][i]), k)
    mask, k = best
    full = [j for j in range(n) if (mask >> j) & 1]
    order = full + [k]
    return _vertex_fill(caps, total, order)


def _worst_heuristic(markets, fs: FeasibleSet) -> np.ndarray:
    caps, total = fs.caps, fs.total
    full_val = np.array([float(_cum_surplus(m.demand, c)) for m, c in zip(markets, caps)])
    avg = full_val / np.where(caps > 0, caps, 1.0)
    order = list(np.argsort(avg, kind="stable"))

    def value(order):
        q = _vertex_fill(caps, total, order)
        return sum(float(_cum_surplus(markets[i].demand, q[i])) for i in np.flatnonzero(q)), q

    best_v, best_q = value(order)
    for _ in range(20):
        improved = False
        served = [i for i in order if best_q[i] > 0]
        unserved = [i for i in order if best_q[i] == 0]
        for a in served:
            for b in unserved:
                trial = [b if x == a else a if x == b else x for x in order]
                v, q = value(trial)
                if v < best_v - 1e-12:
                    best_v, best_q, order, improved = v, q, trial, True
                    break
            if improved:
                break
        if not improved:
            break
    return best_q


def worst_cutoff(markets, alloc: Allocation, caps) -> float:
    """Cutoff λ with Pⱼ(q̄ⱼ) <= λ for capped, Pᵢ(0) >= λ for unserved
    markets, and λ = Pₖ(qₖ) at the partially served one."""
    q = alloc.quantities
    interior = [i for i, qi in enumerate(q) if SUM_TOL < qi < caps[i] - SUM_TOL]
    if interior:
        return markets[interior[0]].demand.price(q[interior[0]])
    capped = [markets[i].demand.price(caps[i]) for i, qi in enumerate(q) if qi > SUM_TOL]
    zero = [markets[i].demand.price(0.0) for i, qi in enumerate(q) if qi <= SUM_TOL]
    lo = max(capped) if capped else 0.0
    hi = min(zero) if zero else lo
    return lo if lo <= hi else 0.5 * (lo + hi)


def worst_kkt_residual(markets, alloc: Allocation, lam: float, caps) -> float:
    markets = _as_markets(markets)
    worst = 0.0
    for m, qi, cap in zip(markets, alloc.quantities, caps):
        if qi <= SUM_TOL:
            worst = max(worst, lam - m.demand.price(0.0))
        elif qi >= cap - SUM_TOL:
            worst = max(worst, m.demand.price(cap) - lam)
        else:
            worst = max(worst, abs(m.demand.price(qi) - lam))
    return worst


def smallest_average_value(markets, total: float) -> int:
    """Index minimizing the average value ∫₀^Q̄ Pᵢ / Q̄ among markets able
    to absorb the whole supply alone."""
    markets = _as_markets(markets)
    best, best_v = None, math.inf
    for i, m in enumerate(markets):
        if m.q_max >= total:
            v = m.demand.integral(0.0, total)
            if v < best_v:
                best, best_v = i, v
    if best is None:
        raise InfeasibleError("no single market can absorb the supply")
    return best


# ------------------------------------------------------------------ welfare


def gross_surplus_total(markets, q) -> float:
    markets = _as_markets(markets)
    q = q.quantities if isinstance(q, Allocation) else np.asarray(q, float)
    return math.fsum(m.demand.integral(0.0, float(qi)) for m, qi in zip(markets, q))


def misallocation_loss(markets, fs: FeasibleSet, q, q_star=None) -> float:
    """Σᵢ ∫_{qᵢ}^{qᵢ*} Pᵢ, the surplus gap to the efficient allocation."""
    markets = _as_markets(markets)
    q = q.quantities if isinstance(q, Allocation) else np.asarray(q, float)
    Allocation.build(q, fs)
    if q_star is None:
        q_star = efficient_allocation(markets, fs)[0]
    q_star = q_star.quantities if isinstance(q_star, Allocation) else np.asarray(q_star, float)
    return math.fsum(m.demand.integral(float(a), float(b)) for m, a, b in zip(markets, q, q_star))


def harberger_loss(aggregate_demand: DemandCurve, base_p: float, base_q: float, total: float) -> float:
    """Triangle between demand and the baseline price over [Q̄, base_q]."""
    if total > base_q + SUM_TOL:
        raise DomainError("supply exceeds the baseline quantity")
    if total >= base_q:
        return 0.0
    return aggregate_demand.integral(total, base_q) - base_p * (base_q - total)


def welfare_report(markets, fs: FeasibleSet, q, p_bar: float, shadow_price=None, harberger=None) -> WelfareReport:
    markets = _as_markets(markets)
    qv = q.quantities if isinstance(q, Allocation) else np.asarray(q, float)
    gross = gross_surplus_total(markets, qv)
    loss = misallocation_loss(markets, fs, qv)
    ratio = loss / harberger if harberger else None
    return WelfareReport(
        gross_surplus=gross,
        net_surplus=gross - p_bar * fs.total,
        shadow_price=shadow_price,
        misallocation_loss=loss,
        harberger_loss=harberger,
        ratio=ratio,
    )

"""Grid-market simulation, jump detection along cost paths, smoothed
counterfactuals and cutoff-gap order statistics.

Randomness: every market i draws from its own PCG64 stream seeded by
``SeedSequence(seed, spawn_key=(0, i))``; scenario-wide draws use
``spawn_key=(1, k)``.  Draws therefore do not depend on iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .allocators import greedy_controlled_allocation
from .core import (
    SUM_TOL,
    Allocation,
    ConvergenceError,
    DomainError,
    FeasibleSet,
    MarketSpec,
    TruncatedHill,
    caps_at_ceiling,
)
from .numerics import bisect_decreasing, clipped_linear_root

# Calibration-free defaults: with 100 markets and supply 150 each market
# clears at quantity 1.5; at 80% of that price one market demands about
# 2.09 units, so roughly 72 markets absorb the supply.
HILL_DEFAULTS = {"choke": 4.0, "scale": 2.5, "exponent": 2.0}
JITTER = 1e-15


@dataclass(frozen=True)
class HillParams:
    choke: float = HILL_DEFAULTS["choke"]
    scale: float = HILL_DEFAULTS["scale"]
    exponent: float = HILL_DEFAULTS["exponent"]


@dataclass(frozen=True)
class ScenarioConfig:
    grid_rows: int = 10
    grid_cols: int = 10
    demand: HillParams = HillParams()
    cost_model: str = "uniform"  # or "systematic"
    cost_lo: float = 0.0
    cost_hi: float = 0.1
    systematic_share: float = 0.5
    supply: float = 150.0
    ceiling_fraction: float = 0.8
    rng_seed: int = 0
    demand_scales: tuple | None = None

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise DomainError("grid must have at least one market")
        if not 0 < self.ceiling_fraction < 1:
            raise DomainError("ceiling_fraction must lie in (0, 1)")
        if not self.cost_lo < self.cost_hi:
            raise DomainError("need cost_lo < cost_hi")
        if self.cost_lo < 0:
            raise DomainError("costs must be nonnegative")
        if self.cost_model not in ("uniform", "systematic"):
            raise DomainError("cost_model must be 'uniform' or 'systematic'")
        if not 0 <= self.systematic_share <= 1:
            raise DomainError("systematic_share must lie in [0, 1]")
        if self.supply <= 0:
            raise DomainError("supply must be positive")
        if self.demand_scales is not None and len(self.demand_scales) != self.n_markets:
            raise DomainError("demand_scales needs one entry per market")

    @property
    def n_markets(self) -> int:
        return self.grid_rows * self.grid_cols


def market_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0, i))))


def scenario_rng(seed: int, k: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, k))))


def draw_costs(cfg: ScenarioConfig) -> np.ndarray:
    n = cfg.n_markets
    u = np.array([market_rng(cfg.rng_seed, i).random() for i in range(n)])
    if cfg.cost_model == "uniform":
        unit = u
    else:
        # distance from a randomly placed depot plus an idiosyncratic part
        depot = scenario_rng(cfg.rng_seed, 0).random(2) * [cfg.grid_rows - 1, cfg.grid_cols - 1]
        rows, cols = np.divmod(np.arange(n), cfg.grid_cols)
        dist = np.hypot(rows - depot[0], cols - depot[1])
        dist = dist / dist.max() if dist.max() > 0 else dist
        w = cfg.systematic_share
        unit = w * dist + (1 - w) * u
    costs = cfg.cost_lo + (cfg.cost_hi - cfg.cost_lo) * unit
    return break_ties(costs)


def break_ties(costs: np.ndarray) -> np.ndarray:
    """Add index-scaled jitter when two costs coincide within 1e-12."""
    s = np.sort(costs)
    if np.any(np.diff(s) <= 1e-12):
        return costs + JITTER * np.arange(costs.size)
    return costs


def build_markets(cfg: ScenarioConfig, costs: np.ndarray | None = None) -> list[MarketSpec]:
    costs = draw_costs(cfg) if costs is None else costs
    scales = np.ones(cfg.n_markets) if cfg.demand_scales is None else np.asarray(cfg.demand_scales, float)
    d = cfg.demand
    return [
        MarketSpec(TruncatedHill(d.choke, d.scale * sc, d.exponent), unit_cost=float(c))
        for sc, c in zip(scales, costs)
    ]


def _hill_quantities(markets: Sequence[MarketSpec], prices: np.ndarray) -> np.ndarray:
    return np.array([m.demand.quantity(float(p)) for m, p in zip(markets, prices)])


def clearing_price(markets: Sequence[MarketSpec], supply: float) -> float:
    """Common price at which aggregate demand equals supply."""

    def demand(p):
        return math.fsum(m.demand.quantity(p) for m in markets)

    top = max(m.demand.choke for m in markets)
    lo, hi = bisect_decreasing(demand, 1e-12 * top, top, supply)
    return 0.5 * (lo + hi)


def free_allocation(markets: Sequence[MarketSpec], supply: float) -> tuple[np.ndarray, float]:
    """Cost-adjusted efficient allocation: Pᵢ(qᵢ) − cᵢ = λ for all served i."""
    c = np.array([m.unit_cost for m in markets])

    def demand(lam):
        return math.fsum(_hill_quantities(markets, lam + c))

    lo = -c.min() + 1e-12
    hi = max(m.demand.choke for m in markets) - c.min()
    a, b = bisect_decreasing(demand, lo, hi, supply)
    q_hi, q_lo = _hill_quantities(markets, b + c), _hill_quantities(markets, a + c)
    gap = q_lo - q_hi
    resid = supply - math.fsum(q_hi)
    q = q_hi + (resid * gap / gap.sum() if gap.sum() > 0 else 0.0)
    return q, 0.5 * (a + b)


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    costs: np.ndarray
    caps: np.ndarray
    market_price: float
    ceiling: float
    free_allocation: np.ndarray
    free_multiplier: float
    controlled_allocation: Allocation
    welfare_free: float
    welfare_controlled: float
    welfare_free_net: float
    welfare_controlled_net: float
    unserved_count: int
    markets: tuple = field(repr=False, default=())

    @property
    def feasible_set(self) -> FeasibleSet:
        return FeasibleSet(self.caps, self.config.supply)


def _gross(markets, q) -> float:
    return math.fsum(m.demand.integral(0.0, float(x)) for m, x in zip(markets, q))


def run_grid_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    costs = draw_costs(cfg)
    markets = build_markets(cfg, costs)
    p_mc = clearing_price(markets, cfg.supply)
    ceiling = cfg.ceiling_fraction * p_mc
    caps = caps_at_ceiling(markets, ceiling)
    fs = FeasibleSet(caps, cfg.supply)
    q_free, lam = free_allocation(markets, cfg.supply)
    ctrl = greedy_controlled_allocation(costs, fs, tie_break="index", check_degenerate=False)
    w_free = _gross(markets, q_free)
    w_ctrl = _gross(markets, ctrl.quantities)
    return ScenarioResult(
        config=cfg,
        costs=costs,
        caps=caps,
        market_price=p_mc,
        ceiling=ceiling,
        free_allocation=q_free,
        free_multiplier=lam,
        controlled_allocation=ctrl,
        welfare_free=w_free,
        welfare_controlled=w_ctrl,
        welfare_free_net=w_free - float(np.dot(costs, q_free)),
        welfare_controlled_net=w_ctrl - float(np.dot(costs, ctrl.quantities)),
        unserved_count=int(np.sum(ctrl.quantities == 0.0)),
        markets=tuple(markets),
    )


def scenario_rows(res: ScenarioResult) -> list[dict]:
    """Per-market records for heatmap-style output."""
    cols = res.config.grid_cols
    out = []
    for i, (c, qf, qc, tag) in enumerate(
        zip(res.costs, res.free_allocation, res.controlled_allocation.quantities, res.controlled_allocation.classification)
    ):
        out.append(
            {
                "market_index": i,
                "row": i // cols,
                "col": i % cols,
                "cost": float(c),
                "free_q": float(qf),
                "controlled_q": float(qc),
                "classification": tag.value,
            }
        )
    return out


# ------------------------------------------------------------ jump detection


@dataclass(frozen=True)
class JumpEvent:
    t: float
    pre: Allocation
    post: Allocation
    mass: float
    welfare_jump: float
    markets: tuple
    compound: bool = False


def sweep_cost_path(
    markets: Sequence[MarketSpec],
    fs: FeasibleSet,
    c0,
    eta,
    t_range: tuple[float, float],
    step: float,
    t_tol: float = 1e-10,
    split_tol: float = 1e-12,
) -> list[JumpEvent]:
    """Every t in ``t_range`` at which the cost-minimizing vertex changes
    along c(t) = c0 + t·eta, localized to ``t_tol``.

    Several crossings inside one grid step are separated by recursive
    bisection; crossings still coincident at ``split_tol`` are reported
    as a single compound event.
    """
    c0 = np.asarray(c0, float)
    eta = np.asarray(eta, float)
    t_lo, t_hi = map(float, t_range)
    if not t_lo < t_hi or step <= 0:
        raise DomainError("need t_lo < t_hi and step > 0")

    def alloc(t):
        return greedy_controlled_allocation(c0 + t * eta, fs, tie_break="index", check_degenerate=False)

    def same(x, y):
        return np.array_equal(x.quantities, y.quantities)

    events: list[JumpEvent] = []

    def locate(tl, al, tr, ar):
        stack = [(tl, al, tr, ar)]
        found = []
        while stack:
            tl, al, tr, ar = stack.pop()
            if same(al, ar):
                continue
            width = tr - tl
            n_diff = int(np.sum(al.quantities != ar.quantities))
            if width <= t_tol and (n_diff == 2 or width <= split_tol):
                found.append(_event(markets, 0.5 * (tl + tr), al, ar, compound=n_diff != 2))
                continue
            mid = 0.5 * (tl + tr)
            if mid <= tl or mid >= tr:
                found.append(_event(markets, mid, al, ar, compound=n_diff != 2))
                continue
            am = alloc(mid)
            stack.append((mid, am, tr, ar))
            stack.append((tl, al, mid, am))
        return sorted(found, key=lambda e: e.t)

    n_steps = max(1, int(math.ceil((t_hi - t_lo) / step)))
    grid = np.linspace(t_lo, t_hi, n_steps + 1)
    prev_t, prev_a = grid[0], alloc(grid[0])
    for t in grid[1:]:
        a = alloc(t)
        events.extend(locate(prev_t, prev_a, t, a))
        prev_t, prev_a = t, a
    return events


def _event(markets, t, pre: Allocation, post: Allocation, compound: bool) -> JumpEvent:
    dq = post.quantities - pre.quantities
    changed = np.flatnonzero(pre.quantities != post.quantities)
    dw = math.fsum(
        markets[i].demand.integral(float(pre.quantities[i]), float(post.quantities[i])) for i in changed
    )
    losers = [int(i) for i in changed if dq[i] < 0]
    gainers = [int(i) for i in changed if dq[i] > 0]
    return JumpEvent(
        t=float(t),
        pre=pre,
        post=post,
        mass=float(dq[dq > 0].sum()),
        welfare_jump=dw,
        markets=(tuple(losers), tuple(gainers)) if compound else (losers[0], gainers[0]),
        compound=compound,
    )


def sweep_scenario(cfg: ScenarioConfig, t_range=(-1.0, 1.0), step=0.01, eta=None) -> list[JumpEvent]:
    """Cost-path sweep on a grid scenario; the direction defaults to a
    standard normal draw scaled by the cost range."""
    res = run_grid_scenario(cfg)
    if eta is None:
        eta = scenario_rng(cfg.rng_seed, 1).standard_normal(cfg.n_markets) * (cfg.cost_hi - cfg.cost_lo)
    return sweep_cost_path(res.markets, res.feasible_set, res.costs, eta, t_range, step)


# ------------------------------------------------------- smoothed allocation


def smoothed_allocation(markets, fs: FeasibleSet, kappa: float) -> Allocation:
    """Minimizer of c·q + (κ/2)‖q‖² over the feasible set.

    qᵢ = clip((λ − cᵢ)/κ, 0, q̄ᵢ) with λ chosen so the quantities add up;
    the map λ ↦ Σqᵢ is piecewise linear so λ is found exactly.
    """
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    c = np.asarray([m.unit_cost for m in markets] if isinstance(markets[0], MarketSpec) else markets, float)
    lam, q = clipped_linear_root(-c / kappa, np.full(c.size, 1.0 / kappa), np.zeros(c.size), fs.caps, fs.total)
    alloc = Allocation.build(q, fs)
    if smoothed_kkt_residual(c, fs, kappa, alloc, lam) > 1e-8 * max(1.0, abs(lam)):
        raise ConvergenceError("smoothed allocation failed its optimality check")
    return alloc


def smoothed_kkt_residual(c, fs: FeasibleSet, kappa: float, alloc: Allocation, lam: float) -> float:
    g = np.asarray(c, float) + kappa * alloc.quantities  # marginal cost
    q = alloc.quantities
    tol = SUM_TOL
    r = np.where(q <= tol, np.maximum(lam - g, 0.0), np.where(q >= fs.caps - tol, np.maximum(g - lam, 0.0), np.abs(g - lam)))
    return float(r.max())


# ---------------------------------------------------------- cutoff gaps


@dataclass(frozen=True)
class GapStats:
    n: int
    draws: int
    mean: float
    median: float
    q05: float
    q95: float
    gaps: np.ndarray = field(repr=False)


def cutoff_gap_statistics(
    n_values: Sequence[int],
    draws: int,
    seed: int = 0,
    cost_lo: float = 0.0,
    cost_hi: float = 1.0,
    cap: float = 1.0,
    supply: float | Callable[[int], float] = 0.7,
) -> dict[int, GapStats]:
    """Cost gap between the last served market and the first unserved one.

    ``supply`` is a fraction of total capacity or a callable n -> Q̄.
    Draws without an unserved market are skipped.
    """
    if draws < 1:
        raise DomainError("draws must be positive")
    out = {}
    for j, n in enumerate(n_values):
        rng = scenario_rng(seed, 100 + j)
        total = supply(n) if callable(supply) else supply * n * cap
        fs = FeasibleSet(np.full(n, cap), total)
        gaps = []
        for _ in range(draws):
            costs = rng.uniform(cost_lo, cost_hi, size=n)
            q = greedy_controlled_allocation(costs, fs, tie_break="index", check_degenerate=False).quantities
            order = np.argsort(costs, kind="stable")
            served = np.flatnonzero(q[order] > 0)
            k = int(served[-1])
            if k + 1 < n:
                gaps.append(costs[order[k + 1]] - costs[order[k]])
        g = np.array(gaps)
        if g.size == 0:
            raise DomainError(f"no unserved market for n={n}; lower the supply")
        out[int(n)] = GapStats(int(n), int(g.size), float(g.mean()), float(np.median(g)),
                               float(np.quantile(g, 0.05)), float(np.quantile(g, 0.95)), g)
    return out

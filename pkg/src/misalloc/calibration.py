"""Station-survey ingestion and the rationing calibration.

Quantities are per-capita shares of the national baseline (baseline
price 1, baseline quantity 1).  Every cell's demand is linear through
the baseline point with slope -1/ε for ε in [ε_lo, ε_hi]; a cell with
per-capita quantity x therefore has shadow price 1 + (1 - x)/ε, and the
elasticity range maps to an anchor interval.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .allocators import efficient_allocation, harberger_loss, misallocation_loss
from .bounds import BoundsMarket, BoundsProblem, BoundsResult, solve_bounds
from .core import DomainError, FeasibleSet, LinearAnchored, MarketSpec

SURVEY_COLUMNS = ["state", "share_out", "share_limiting", "share_open", "stations_1972", "gallons_1972"]
SHARE_TOL = 1e-6


class SurveyError(DomainError):
    pass


@dataclass(frozen=True)
class StationSurveyRow:
    state: str
    share_out: float
    share_limiting: float
    share_open: float
    stations_1972: float
    gallons_1972: float | None = None
    imputed: bool = False

    def __post_init__(self):
        shares = (self.share_out, self.share_limiting, self.share_open)
        if any(not 0 <= s <= 1 for s in shares):
            raise SurveyError(f"{self.state}: shares must lie in [0, 1]")
        if abs(sum(shares) - 1) > SHARE_TOL:
            raise SurveyError(f"{self.state}: shares sum to {sum(shares):.6f}, not 1")
        if self.stations_1972 < 0 or (self.gallons_1972 is not None and self.gallons_1972 < 0):
            raise SurveyError(f"{self.state}: counts must be nonnegative")

    @property
    def rationed(self) -> float:
        """Share of stations out of fuel or limiting purchases."""
        return self.share_out + self.share_limiting


@dataclass(frozen=True)
class CalibrationParams:
    ceiling: float = 0.8
    eps_lo: float = 0.2
    eps_hi: float = 0.4
    eps0: float = 0.3
    supply: float = 0.91
    choke: float | None = None
    harberger_epsilon: float = 0.2
    table_choke: float = 4.0
    sweep_points: int = 21
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ceiling < 1:
            raise DomainError("ceiling must lie in (0, 1)")
        if not 0 < self.eps_lo <= self.eps0 <= self.eps_hi:
            raise DomainError("need 0 < eps_lo <= eps0 <= eps_hi")
        if not 0 < self.supply < 1:
            raise DomainError("supply must lie in (0, 1)")
        if self.choke is not None and self.choke <= 1:
            raise DomainError("choke price must exceed the baseline price")

    @property
    def g_steep(self) -> float:
        return -1.0 / self.eps_lo

    @property
    def g_flat(self) -> float:
        return -1.0 / self.eps_hi


# ------------------------------------------------------------------ ingest


def load_station_survey(path: str | Path) -> list[StationSurveyRow]:
    """Read the survey CSV; leading lines starting with '#' are comments."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.reader(lines[skip:])
    try:
        header = next(reader)
    except StopIteration:
        raise SurveyError(f"{path}: empty file") from None
    if [h.strip() for h in header] != SURVEY_COLUMNS:
        raise SurveyError(f"{path}:{skip + 1}: expected header {','.join(SURVEY_COLUMNS)}")
    rows = []
    for line_no, rec in enumerate(reader, start=skip + 2):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != len(SURVEY_COLUMNS):
            raise SurveyError(f"{path}:{line_no}: expected {len(SURVEY_COLUMNS)} fields, got {len(rec)}")
        try:
            gallons = rec[5].strip()
            row = StationSurveyRow(
                state=rec[0].strip(),
                share_out=float(rec[1]),
                share_limiting=float(rec[2]),
                share_open=float(rec[3]),
                stations_1972=float(rec[4]),
                gallons_1972=float(gallons) if gallons else None,
            )
        except (ValueError, SurveyError) as exc:
            raise SurveyError(f"{path}:{line_no}: {exc}") from None
        rows.append(row)
    if not rows:
        raise SurveyError(f"{path}: no data rows")
    return rows


def impute_gallons(rows: Sequence[StationSurveyRow]) -> list[StationSurveyRow]:
    """Fill missing gallons at the national observed gallons-per-station."""
    obs = [r for r in rows if r.gallons_1972 is not None]
    if not obs:
        raise SurveyError("no state has observed gallons")
    per_station = math.fsum(r.gallons_1972 for r in obs) / math.fsum(r.stations_1972 for r in obs)
    return [
        r if r.gallons_1972 is not None else replace(r, gallons_1972=r.stations_1972 * per_station, imputed=True)
        for r in rows
    ]


def national_shares(rows: Sequence[StationSurveyRow], weight: str = "stations") -> dict[str, float]:
    if weight == "stations":
        w = np.array([r.stations_1972 for r in rows])
    elif weight == "gallons":
        if any(r.gallons_1972 is None for r in rows):
            raise SurveyError("gallon weights need imputed rows")
        w = np.array([r.gallons_1972 for r in rows])
    else:
        raise DomainError("weight must be 'stations' or 'gallons'")
    w = w / w.sum()
    return {
        "out": float(np.dot(w, [r.share_out for r in rows])),
        "limiting": float(np.dot(w, [r.share_limiting for r in rows])),
        "open": float(np.dot(w, [r.share_open for r in rows])),
    }


# -------------------------------------------------------------- quantities


def open_quantity(params: CalibrationParams, eps: float | None = None) -> float:
    """Per-capita purchases where stations sell freely at the ceiling."""
    eps = params.eps0 if eps is None else eps
    return 1.0 + (1.0 - params.ceiling) * eps


def nonopen_quantity(params: CalibrationParams, open_share: float, eps: float | None = None) -> float:
    if not 0 <= open_share < 1:
        raise DomainError("non-open share must be positive")
    return (params.supply - open_share * open_quantity(params, eps)) / (1.0 - open_share)


def harberger(params: CalibrationParams, eps: float | None = None) -> float:
    eps = params.harberger_epsilon if eps is None else eps
    return harberger_loss(LinearAnchored(1.0, 1.0, -1.0 / eps), 1.0, 1.0, params.supply)


def anchor_interval(params: CalibrationParams, x: float) -> tuple[float, float]:
    """Shadow prices at per-capita quantity x over the elasticity range."""
    a = 1.0 + (1.0 - x) / params.eps_lo
    b = 1.0 + (1.0 - x) / params.eps_hi
    return min(a, b), max(a, b)


def cell_market(params: CalibrationParams, weight: float, x: float, choke: float | None) -> BoundsMarket:
    lo, hi = anchor_interval(params, x)
    return BoundsMarket(
        q_obs=weight * x,
        p0_lo=lo,
        p0_hi=hi,
        g_lo=params.g_steep / weight,
        g_hi=params.g_flat / weight,
        choke=choke,
    )


@dataclass(frozen=True)
class Cell:
    state: str
    status: str  # "open" or "nonopen"
    weight: float
    x: float


def pooled_two_market(params: CalibrationParams, open_share: float = 0.623):
    """Open and non-open national submarkets; returns (problem, cells)."""
    s = open_share
    x_o = open_quantity(params)
    x_n = nonopen_quantity(params, s)
    cells = [Cell("US", "open", s, x_o), Cell("US", "nonopen", 1.0 - s, x_n)]
    return _problem(params, cells, params.choke), cells


def _problem(params, cells: Sequence[Cell], choke) -> BoundsProblem:
    ms = tuple(cell_market(params, c.weight, c.x, choke) for c in cells)
    return BoundsProblem(ms, params.supply, params.ceiling)


def state_by_status(rows: Sequence[StationSurveyRow], params: CalibrationParams, choke=None):
    """Open and non-open cell per state weighted by gallon share; cells
    with zero share are dropped.  Returns (problem, cells)."""
    if any(r.gallons_1972 is None for r in rows):
        raise SurveyError("impute gallons before building state cells")
    g = np.array([r.gallons_1972 for r in rows], float)
    if g.sum() <= 0:
        raise SurveyError("total gallons must be positive")
    g = g / g.sum()
    s_open = float(np.dot(g, [r.share_open for r in rows]))
    x_o = open_quantity(params)
    x_n = nonopen_quantity(params, s_open)
    cells = []
    for r, w in zip(rows, g):
        if w * r.share_open > 0:
            cells.append(Cell(r.state, "open", w * r.share_open, x_o))
        if w * r.rationed > 0:
            cells.append(Cell(r.state, "nonopen", w * r.rationed, x_n))
    if not cells:
        raise SurveyError("all state cells are inactive")
    return _problem(params, cells, choke if choke is not None else params.choke), cells


# ----------------------------------------------------------- decomposition


@dataclass(frozen=True)
class DecompositionRow:
    label: str
    phi_lower: float
    phi_upper: float
    ratio_lower: float
    ratio_upper: float


def common_elasticity_losses(params: CalibrationParams, cells: Sequence[Cell]) -> list[tuple[float, float, float]]:
    """(ε, Φ, Φ/Harberger(ε)) with every cell on the same line of slope -1/ε."""
    out = []
    q_obs = np.array([c.weight * c.x for c in cells])
    for eps in np.linspace(params.eps_lo, params.eps_hi, params.sweep_points):
        curves = [
            LinearAnchored(c.weight * c.x, 1.0 + (1.0 - c.x) / eps, -1.0 / (eps * c.weight)) for c in cells
        ]
        markets = [MarketSpec(cv) for cv in curves]
        fs = FeasibleSet([cv.q_max for cv in curves], math.fsum(q_obs))
        q_star, _ = efficient_allocation(markets, fs)
        phi = misallocation_loss(markets, fs, q_obs, q_star)
        out.append((float(eps), phi, phi / harberger(params, eps)))
    return out


def assumption_decomposition(
    rows: Sequence[StationSurveyRow] | None,
    params: CalibrationParams,
    cells: Sequence[Cell] | None = None,
) -> list[DecompositionRow]:
    """Loss bounds as restrictions are relaxed one at a time.

    Rows: a common elasticity swept over its range; per-market slope
    bounds with anchors fixed at their interval midpoints; interval
    anchors; interval anchors plus the choke cap.  Ratios in rows 2-4
    use the Harberger loss at ``harberger_epsilon``.
    """
    if cells is None:
        _, cells = state_by_status(rows, params)
    base = _problem(params, cells, None)
    h = harberger(params)
    sweep = common_elasticity_losses(params, cells)
    phis = [s[1] for s in sweep]
    ratios = [s[2] for s in sweep]
    out = [DecompositionRow("common elasticity", min(phis), max(phis), min(ratios), max(ratios))]
    regimes = [
        ("heterogeneous slopes", base, "fixed"),
        ("+ anchor uncertainty", base, "interval"),
        (f"+ choke constraint (M={params.table_choke:g})", base.with_choke(params.table_choke), "interval"),
    ]
    for label, prob, mode in regimes:
        r = solve_bounds(prob, mode, restarts=params.restarts, seed=params.seed)
        out.append(DecompositionRow(label, r.phi_lower, r.phi_upper, r.phi_lower / h, r.phi_upper / h))
    return out


# ------------------------------------------------------------ shadow prices


def state_shadow_prices(
    rows: Sequence[StationSurveyRow],
    params: CalibrationParams,
    side: str = "upper",
    result: BoundsResult | None = None,
) -> list[tuple[str, float]]:
    """Rationing-share weighted average of each state's open and
    non-open anchor prices at the bound-attaining configuration."""
    prob, cells = state_by_status(rows, params)
    if result is None:
        result = solve_bounds(prob, "interval", restarts=params.restarts, seed=params.seed)
    anchors = result.anchors_upper if side == "upper" else result.anchors_lower
    price = {(c.state, c.status): float(a) for c, a in zip(cells, anchors)}
    out = []
    for r in rows:
        p_open = price.get((r.state, "open"), 0.0)
        p_non = price.get((r.state, "nonopen"), 0.0)
        out.append((r.state, (1.0 - r.rationed) * p_open + r.rationed * p_non))
    return out


def headline(params: CalibrationParams, open_share: float = 0.623) -> dict:
    """Pooled benchmark: quantities, Harberger loss and ratio bounds."""
    prob, cells = pooled_two_market(params, open_share)
    r = solve_bounds(prob, "interval", restarts=params.restarts, seed=params.seed)
    h = harberger(params)
    return {
        "open_share": open_share,
        "q_open": cells[0].x,
        "q_nonopen": cells[1].x,
        "q_open_range": [open_quantity(params, params.eps_lo), open_quantity(params, params.eps_hi)],
        "q_nonopen_range": sorted(
            [nonopen_quantity(params, open_share, params.eps_lo), nonopen_quantity(params, open_share, params.eps_hi)]
        ),
        "harberger_loss": h,
        "phi_lower": r.phi_lower,
        "phi_upper": r.phi_upper,
        "ratio_lower": r.phi_lower / h,
        "ratio_upper": r.phi_upper / h,
        "p_star_lower": r.p_star_lower,
        "p_star_upper": r.p_star_upper,
    }


def rows_from_iter(records: Iterable[dict]) -> list[StationSurveyRow]:
    return [StationSurveyRow(**rec) for rec in records]

"""Command-line front end.

    misalloc allocate  --config cfg.json --out DIR
    misalloc worst     --config cfg.json --out DIR
    misalloc bounds    --config problem.json --out DIR [--anchors fixed|interval] [--choke M]
    misalloc simulate  [--config scenario.json] --out DIR [--seed N ...]
    misalloc sweep     [--config scenario.json] --out DIR [--seed N ...]
    misalloc calibrate [--config calib.json] --out DIR [--epsilon LO HI] [--choke M]

Exit status: 0 success, 2 invalid input, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import allocators as al
from . import bounds as bd
from . import calibration as cal
from . import chaos as ch
from .core import (
    DemandCurve,
    DomainError,
    FeasibleSet,
    LinearAnchored,
    MarketSpec,
    MisallocError,
    PiecewiseAffine,
    TruncatedHill,
    caps_at_ceiling,
)

SCHEMA_VERSION = 1
SIG_DIGITS = 12
log = logging.getLogger("misalloc")


# ------------------------------------------------------------ formatting


def fmt(x: float) -> str:
    return f"{x:.{SIG_DIGITS}g}"


def _clean(obj: Any) -> Any:
    """Round floats to 12 significant digits and make JSON-safe."""
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: Path, payload: dict) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)  # RFC-4180 framing, CRLF line endings
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


# --------------------------------------------------------------- configs


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DomainError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DomainError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise DomainError("config must be a JSON object")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise DomainError(f"unsupported schema_version {version}")
    return cfg


def demand_from_dict(d: dict) -> DemandCurve:
    kind = d.get("type")
    if kind == "linear":
        return LinearAnchored(float(d["anchor_q"]), float(d["anchor_p"]), float(d["slope"]), d.get("q_max"))
    if kind == "hill":
        return TruncatedHill(float(d["choke"]), float(d["scale"]), float(d.get("exponent", 2.0)),
                             float(d.get("q_max", math.inf)))
    if kind == "piecewise":
        return PiecewiseAffine(tuple((float(q), float(p)) for q, p in d["knots"]))
    raise DomainError(f"unknown demand type {kind!r}")


def demand_to_dict(c: DemandCurve) -> dict:
    if isinstance(c, LinearAnchored):
        return {"type": "linear", "anchor_q": c.anchor_q, "anchor_p": c.anchor_p, "slope": c.slope, "q_max": c.q_max}
    if isinstance(c, TruncatedHill):
        return {"type": "hill", "choke": c.choke_price, "scale": c.scale, "exponent": c.exponent}
    return {"type": "piecewise", "knots": [list(k) for k in c.knots]}


def markets_from_config(cfg: dict) -> tuple[list[MarketSpec], FeasibleSet, float | None]:
    try:
        markets = [
            MarketSpec(demand_from_dict(m["demand"]), float(m.get("unit_cost", 0.0)), m.get("q_max"))
            for m in cfg["markets"]
        ]
        supply = float(cfg["supply"])
    except (KeyError, TypeError) as exc:
        raise DomainError(f"config missing field {exc}") from None
    ceiling = cfg.get("ceiling")
    if "caps" in cfg:
        caps = np.asarray(cfg["caps"], float)
    elif ceiling is not None:
        caps = caps_at_ceiling(markets, float(ceiling))
    else:
        raise DomainError("config needs 'caps' or 'ceiling'")
    return markets, FeasibleSet(caps, supply), None if ceiling is None else float(ceiling)


def bounds_problem_from_config(cfg: dict, choke: float | None = None, epsilon=None) -> bd.BoundsProblem:
    """``epsilon`` = (lo, hi) replaces every market's slope bounds by
    [-1/lo, -1/hi] (baseline price and quantity normalized to 1)."""
    try:
        ms = []
        for m in cfg["markets"]:
            lo, hi = m["p0"] if isinstance(m["p0"], list) else (m["p0"], m["p0"])
            g_lo, g_hi = m["slope"] if epsilon is None else (-1.0 / epsilon[0], -1.0 / epsilon[1])
            mc = m.get("choke") if choke is None else choke
            ms.append(bd.BoundsMarket(float(m["q_obs"]), float(lo), float(hi), float(g_lo), float(g_hi),
                                      None if mc is None else float(mc), m.get("q_max")))
        total = float(cfg.get("supply", math.fsum(m.q_obs for m in ms)))
        return bd.BoundsProblem(tuple(ms), total, float(cfg.get("ceiling", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed bounds problem: {exc}") from None


def bounds_problem_to_config(prob: bd.BoundsProblem, harberger: dict | None = None) -> dict:
    out = {
        "supply": prob.total,
        "ceiling": prob.ceiling,
        "markets": [
            {"q_obs": m.q_obs, "p0": [m.p0_lo, m.p0_hi], "slope": [m.g_lo, m.g_hi], "choke": m.choke, "q_max": m.q_max}
            for m in prob.markets
        ],
    }
    if harberger:
        out["harberger"] = harberger
    return out


def scenario_from_config(cfg: dict, seed: int | None) -> ch.ScenarioConfig:
    fields = {f.name for f in dataclasses.fields(ch.ScenarioConfig)}
    kw = {k: v for k, v in cfg.items() if k in fields}
    unknown = set(cfg) - fields - {"schema_version", "sweep"}
    if unknown:
        raise DomainError(f"unknown scenario fields: {sorted(unknown)}")
    if "demand" in kw:
        kw["demand"] = ch.HillParams(**kw["demand"])
    if "demand_scales" in kw and kw["demand_scales"] is not None:
        kw["demand_scales"] = tuple(kw["demand_scales"])
    if seed is not None:
        kw["rng_seed"] = seed
    try:
        return ch.ScenarioConfig(**kw)
    except TypeError as exc:
        raise DomainError(str(exc)) from None


# -------------------------------------------------------------- commands


def _alloc_record(alloc, **extra) -> dict:
    return {"allocation": alloc.quantities, "classification": [t.value for t in alloc.classification], **extra}


def _harberger_from(cfg: dict) -> float | None:
    h = cfg.get("harberger")
    if not h:
        return None
    base_p = float(h.get("base_price", 1.0))
    base_q = float(h.get("base_quantity", 1.0))
    eps = float(h["epsilon"])
    supply = float(h.get("supply", cfg.get("supply")))
    curve = LinearAnchored(base_q, base_p, -base_p / (eps * base_q))
    return al.harberger_loss(curve, base_p, base_q, supply)


def cmd_allocate(args, cfg, out: Path) -> None:
    markets, fs, ceiling = markets_from_config(cfg)
    p_bar = ceiling if ceiling is not None else 0.0
    h = _harberger_from(cfg)
    eff, p_star = al.efficient_allocation(markets, fs, ceiling)
    payload = {
        "efficient": _alloc_record(
            eff, shadow_price=p_star, welfare=dataclasses.asdict(al.welfare_report(markets, fs, eff, p_bar, p_star, h))
        )
    }
    greedy = al.greedy_controlled_allocation(markets, fs, tie_break=args.tie_break)
    payload["controlled"] = _alloc_record(
        greedy, welfare=dataclasses.asdict(al.welfare_report(markets, fs, greedy, p_bar, None, h))
    )
    write_json(out / "welfare.json", payload)


def cmd_worst(args, cfg, out: Path) -> None:
    markets, fs, ceiling = markets_from_config(cfg)
    w, lam = al.worst_case_allocation(markets, fs)
    p_bar = ceiling if ceiling is not None else 0.0
    rep = al.welfare_report(markets, fs, w, p_bar, lam, _harberger_from(cfg))
    write_json(out / "worst.json", {"worst": _alloc_record(w, cutoff=lam, welfare=dataclasses.asdict(rep))})


def _bounds_payload(res: bd.BoundsResult, harberger: float | None) -> dict:
    payload = {
        "phi_lower": res.phi_lower,
        "phi_upper": res.phi_upper,
        "p_star_lower": res.p_star_lower,
        "p_star_upper": res.p_star_upper,
        "anchors_lower": res.anchors_lower,
        "anchors_upper": res.anchors_upper,
        "endpoints_lower": res.endpoints_lower,
        "endpoints_upper": res.endpoints_upper,
        "interval_I": list(res.interval_I),
        "extremal_lower": [[list(k) for k in c.knots] for c in res.extremal_lower],
        "extremal_upper": [[list(k) for k in c.knots] for c in res.extremal_upper],
        "diagnostics": res.diagnostics,
    }
    if harberger:
        payload.update(harberger_loss=harberger, ratio_lower=res.phi_lower / harberger,
                       ratio_upper=res.phi_upper / harberger)
    return payload


def cmd_bounds(args, cfg, out: Path) -> None:
    prob = bounds_problem_from_config(cfg, args.choke, args.epsilon)
    mode = args.anchors or cfg.get("anchors", "fixed")
    anchors = cfg.get("anchor_values")
    res = bd.solve_bounds(prob, mode, anchors=anchors, seed=args.seed[0] if args.seed else 0)
    write_json(out / "bounds.json", _bounds_payload(res, _harberger_from(cfg)))


def _seeds(args, cfg) -> list[int | None]:
    return args.seed if args.seed else [cfg.get("rng_seed", 0)]


def cmd_simulate(args, cfg, out: Path) -> None:
    for seed in _seeds(args, cfg):
        sc = scenario_from_config(cfg, seed)
        res = ch.run_grid_scenario(sc)
        rows = ch.scenario_rows(res)
        header = ["market_index", "row", "col", "cost", "free_q", "controlled_q", "classification"]
        write_csv(out / f"grid_seed{sc.rng_seed}.csv", header, [[r[h] for h in header] for r in rows])
        summary = {
            "config": dataclasses.asdict(sc),
            "market_price": res.market_price,
            "ceiling": res.ceiling,
            "welfare_free": res.welfare_free,
            "welfare_controlled": res.welfare_controlled,
            "welfare_free_net": res.welfare_free_net,
            "welfare_controlled_net": res.welfare_controlled_net,
            "unserved_count": res.unserved_count,
            "interior_count": res.controlled_allocation.n_interior,
        }
        write_json(out / f"summary_seed{sc.rng_seed}.json", summary)


def cmd_sweep(args, cfg, out: Path) -> None:
    spec = cfg.get("sweep", {})
    for seed in _seeds(args, cfg):
        sc = scenario_from_config(cfg, seed)
        eta = spec.get("direction")
        events = ch.sweep_scenario(
            sc, tuple(spec.get("t_range", (-1.0, 1.0))), float(spec.get("step", 0.01)),
            None if eta is None else np.asarray(eta, float),
        )
        header = ["t", "market_r", "market_s", "reallocated_mass", "welfare_jump", "compound"]
        rows = []
        for e in events:
            r, s = e.markets
            rows.append([e.t, _ids(r), _ids(s), e.mass, e.welfare_jump, int(e.compound)])
        write_csv(out / f"jumps_seed{sc.rng_seed}.csv", header, rows)


def _ids(x) -> str:
    return " ".join(map(str, x)) if isinstance(x, tuple) else str(x)


def shipped_survey() -> Path:
    return Path(str(resources.files("misalloc") / "data" / "synthetic_state_survey.csv"))


def cmd_calibrate(args, cfg, out: Path) -> None:
    fields = {f.name for f in dataclasses.fields(cal.CalibrationParams)}
    kw = {k: v for k, v in cfg.get("params", {}).items() if k in fields}
    if args.epsilon:
        kw["eps_lo"], kw["eps_hi"] = args.epsilon
    if args.choke is not None:
        kw["choke"] = kw["table_choke"] = args.choke
    if args.seed:
        kw["seed"] = args.seed[0]
    params = cal.CalibrationParams(**kw)
    survey = Path(cfg["survey"]) if "survey" in cfg else shipped_survey()
    rows = cal.impute_gallons(cal.load_station_survey(survey))
    open_share = float(cfg.get("open_share", cal.national_shares(rows)["open"]))
    head = cal.headline(params, open_share)
    table = cal.assumption_decomposition(rows, params)
    prob, cells = cal.state_by_status(rows, params)
    res = bd.solve_bounds(prob, "interval", restarts=params.restarts, seed=params.seed)
    upper = dict(cal.state_shadow_prices(rows, params, "upper", res))
    lower = dict(cal.state_shadow_prices(rows, params, "lower", res))
    write_json(
        out / "decomposition.json",
        {
            "survey": survey.name,
            "params": dataclasses.asdict(params),
            "headline": head,
            "active_cells": len(cells),
            "gallon_weighted_open_share": cal.national_shares(rows, "gallons")["open"],
            "rows": [dataclasses.asdict(r) for r in table],
        },
    )
    write_csv(out / "shadow_prices.csv", ["state", "upper", "lower"],
              [[r.state, upper[r.state], lower[r.state]] for r in rows])
    pooled, _ = cal.pooled_two_market(params, open_share)
    write_json(out / "pooled_problem.json",
               {**bounds_problem_to_config(pooled, {"epsilon": params.harberger_epsilon, "supply": params.supply}),
                "anchors": "interval"})


COMMANDS = {
    "allocate": cmd_allocate,
    "worst": cmd_worst,
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
}
NEEDS_CONFIG = {"allocate", "worst", "bounds"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config path")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, action="append", help="64-bit seed; repeat to run several")
    common.add_argument("--tie-break", choices=["index", "error"], default="error")
    common.add_argument("--choke", type=float, default=None, help="choke price cap M")
    common.add_argument("--epsilon", type=float, nargs=2, metavar=("LO", "HI"))
    common.add_argument("--anchors", choices=["fixed", "interval"])
    common.add_argument("-v", "--verbose", action="count", default=0)
    ap = argparse.ArgumentParser(prog="misalloc", description="Allocation under a binding price ceiling.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        if args.command in NEEDS_CONFIG and not args.config:
            raise DomainError(f"{args.command} requires --config")
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except MisallocError as exc:
        _report(exc, exc.code)
        return exc.code
    except (ValueError, KeyError, TypeError, OSError) as exc:
        _report(exc, 2)
        return 2
    return 0


def _report(exc: Exception, code: int) -> None:
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}, sort_keys=True),
          file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Generate the SYNTHETIC state-level station survey shipped with the package.

The per-state values are invented.  They are constrained to match the
published national aggregates and the qualitative extremes only:

* 48 states (Alabama, Alaska and DC excluded);
* station-weighted national shares: 10.1% out of fuel, 27.6% limiting,
  62.3% open;
* ID, MT, UT, HI and WY report no rationing, CT and MA more than 90%;
* 12 states lack 1972 gallon sales and are imputed by the loader;
* per-station sales rise with rationing so that the gallon-weighted
  open share after imputation is 0.6116.

Replace the output with a digitized survey file of the same schema to
run the calibration on real data.

    python scripts/make_synthetic_survey.py [--out PATH] [--seed N]
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

STATES = (
    "AZ AR CA CO CT DE FL GA HI ID IL IN IA KS KY LA ME MD MA MI MN MS MO MT NE NV NH NJ "
    "NM NY NC ND OH OK OR PA RI SC SD TN TX UT VT VA WA WV WI WY"
).split()
UNRATIONED = {"ID", "MT", "UT", "HI", "WY"}
HEAVY = {"CT": 0.932, "MA": 0.91}
TARGET_OUT, TARGET_LIMITING = 0.101, 0.276
TARGET_GALLON_OPEN = 0.6116
N_MISSING = 12
GALLONS_PER_STATION = 420.0  # thousand gallons, scale only

HEADER = [
    "# SYNTHETIC DATA generated by scripts/make_synthetic_survey.py.",
    "# Per-state values are invented; only national aggregates and named extremes are matched.",
]


def _rationed_shares(rng, stations):
    free = np.array([s not in UNRATIONED and s not in HEAVY for s in STATES])
    raw = rng.beta(2.0, 2.5, size=len(STATES))
    target = TARGET_OUT + TARGET_LIMITING
    w = stations / stations.sum()

    def build(scale):
        r = np.where(free, np.clip(scale * raw, 0.02, 0.88), 0.0)
        for i, s in enumerate(STATES):
            if s in HEAVY:
                r[i] = HEAVY[s]
        return r

    scale = brentq(lambda a: np.dot(w, build(a)) - target, 0.01, 10.0, xtol=1e-14)
    return build(scale)


def _out_shares(rng, stations, rationed):
    phi = rng.uniform(0.15, 0.40, size=len(STATES))
    w = stations / stations.sum()

    def build(scale):
        return np.minimum(scale * phi, 0.9) * rationed

    scale = brentq(lambda b: np.dot(w, build(b)) - TARGET_OUT, 0.01, 10.0, xtol=1e-14)
    return build(scale)


def generate(seed: int = 1974):
    rng = np.random.default_rng(seed)
    stations = np.round(rng.lognormal(8.3, 0.8, size=len(STATES)))
    rationed = _rationed_shares(rng, stations)
    out = np.round(_out_shares(rng, stations, rationed), 6)
    limiting = np.round(rationed - out, 6)
    open_ = np.round(1.0 - out - limiting, 6)
    missing = set(rng.choice([s for s in STATES if s not in UNRATIONED | set(HEAVY)], N_MISSING, replace=False))
    noise = rng.normal(0.0, 0.05, size=len(STATES))
    observed = np.array([s not in missing for s in STATES])
    r = out + limiting

    def gallons(kappa):
        per = GALLONS_PER_STATION * np.exp(kappa * (r - r.mean()) + noise)
        return np.round(stations * per)

    def gallon_open_share(kappa):
        g = gallons(kappa)
        rate = g[observed].sum() / stations[observed].sum()
        g = np.where(observed, g, stations * rate)
        return np.dot(g, open_) / g.sum()

    kappa = brentq(lambda k: gallon_open_share(k) - TARGET_GALLON_OPEN, -5.0, 5.0, xtol=1e-12)
    g = gallons(kappa)
    records = []
    for i, s in enumerate(STATES):
        records.append(
            [s, f"{out[i]:.6f}", f"{limiting[i]:.6f}", f"{open_[i]:.6f}", f"{int(stations[i])}",
             f"{int(g[i])}" if observed[i] else ""]
        )
    return records


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default = Path(__file__).resolve().parents[1] / "src" / "misalloc" / "data" / "synthetic_state_survey.csv"
    ap.add_argument("--out", type=Path, default=default)
    ap.add_argument("--seed", type=int, default=1974)
    args = ap.parse_args(argv)
    records = generate(args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="", encoding="utf-8") as fh:
        fh.write("\n".join(HEADER) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "share_out", "share_limiting", "share_open", "stations_1972", "gallons_1972"])
        w.writerows(records)
    print(f"wrote {len(records)} synthetic rows to {args.out}")


if __name__ == "__main__":
    main()

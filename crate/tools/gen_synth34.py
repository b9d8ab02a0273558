#!/usr/bin/env python3
"""Generates feeders/synth34.json, the bundled synthetic unbalanced feeder.

A 34-node-class radial feeder: a long three-phase trunk with three-phase,
two-phase and single-phase laterals, 135 node-phases in total. Every
non-source node-phase carries a constant-power load and a rooftop-PV
aggregate. Impedances are synthetic (diagonal-dominant phase matrices with
mild mutual coupling), not IEEE 34-node line data.

Usage: python3 tools/gen_synth34.py [--scale S] [--source-v V] [--out PATH]
"""

import argparse
import json
import random

BASE_KV = 14.376  # 24.9 kV line-to-line
BASE_KVA = 1000.0
Z_BASE = BASE_KV**2 * 1000.0 / BASE_KVA

# Per-unit self impedance per unit length, and mutual coupling fractions.
R_SELF, X_SELF = 0.0040, 0.0090
R_MUT, X_MUT = 0.0004, 0.0030

ABC = ["A", "B", "C"]


def build(scale, seed, source_v):
    rng = random.Random(seed)
    buses = [{"id": "800", "phases": ABC}]
    lines = []
    counter = [801]

    def add_bus(parent, phases, length):
        bid = str(counter[0])
        counter[0] += 1
        buses.append({"id": bid, "phases": phases})
        k = len(phases)
        z = []
        for i in range(k):
            row = []
            for j in range(k):
                if i == j:
                    re, im = R_SELF, X_SELF
                else:
                    re, im = R_MUT, X_MUT
                row.append(
                    {
                        "re": round(re * length * scale * Z_BASE, 6),
                        "im": round(im * length * scale * Z_BASE, 6),
                    }
                )
            z.append(row)
        lines.append({"id": f"L{bid}", "from_bus": parent, "to_bus": bid, "impedance": z})
        return bid

    def chain(parent, phases, lengths):
        ids = []
        for length in lengths:
            parent = add_bus(parent, phases, length)
            ids.append(parent)
        return ids

    trunk = chain("800", ABC, [rng.uniform(0.6, 1.4) for _ in range(24)])
    chain(trunk[11], ABC, [rng.uniform(0.5, 1.2) for _ in range(8)])
    chain(trunk[17], ABC, [rng.uniform(0.5, 1.2) for _ in range(7)])
    chain(trunk[5], ["A", "B"], [rng.uniform(0.5, 1.0) for _ in range(2)])
    chain(trunk[14], ["B", "C"], [rng.uniform(0.5, 1.0) for _ in range(3)])
    chain(trunk[2], ["A"], [rng.uniform(0.5, 1.0)])
    chain(trunk[8], ["B"], [rng.uniform(0.5, 1.0) for _ in range(2)])
    chain(trunk[19], ["C"], [rng.uniform(0.5, 1.0) for _ in range(2)])

    loads, pvs = [], []
    for bus in buses[1:]:
        for ph in bus["phases"]:
            p = round(rng.uniform(15.0, 45.0), 3)
            loads.append(
                {"bus_id": bus["id"], "phase": ph, "p_kw": p, "q_kvar": round(0.3 * p, 3)}
            )
            p_rated = round(1.05 * p, 3)
            pvs.append(
                {
                    "bus_id": bus["id"],
                    "phase": ph,
                    "s_rated_kva": round(1.2 * p_rated, 3),
                    "p_rated_kw": p_rated,
                }
            )

    node_phases = sum(len(b["phases"]) for b in buses)
    assert node_phases == 135, node_phases
    return {
        "source_bus_id": "800",
        "base_voltage_kv": BASE_KV,
        "base_power_kva": BASE_KVA,
        "source_voltage_pu": source_v,
        "buses": buses,
        "lines": lines,
        "loads": loads,
        "pv_units": pvs,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scale", type=float, default=1.7)
    ap.add_argument("--seed", type=int, default=34)
    ap.add_argument("--source-v", type=float, default=1.03)
    ap.add_argument("--out", default="feeders/synth34.json")
    args = ap.parse_args()
    feeder = build(args.scale, args.seed, args.source_v)
    with open(args.out, "w") as fh:
        json.dump(feeder, fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()

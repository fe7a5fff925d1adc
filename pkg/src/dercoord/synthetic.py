"""Builders for the bundled scenarios.

The bundled JSON files under ``dercoord/data`` are the output of these
builders; ``python3 -m dercoord.synthetic`` regenerates them. Line
impedances of the 37-node feeder are approximate single-phase values for
the standard IEEE 37-node line configurations; loads, irradiance and
temperatures come from the seeded ``feeder_day`` generator.
"""

from __future__ import annotations

import json
import os
from collections import deque

import numpy as np

# (from, to, length in ft, configuration); "xfm" is the 500 kVA station transformer
IEEE37_LINES = [
    (799, 701, 1850, 721), (701, 702, 960, 722), (702, 705, 400, 724), (702, 713, 360, 723),
    (702, 703, 1320, 722), (703, 727, 240, 724), (703, 730, 600, 723), (704, 714, 80, 724),
    (704, 720, 800, 723), (705, 742, 320, 724), (705, 712, 240, 724), (706, 725, 280, 724),
    (707, 724, 760, 724), (707, 722, 120, 724), (708, 733, 320, 723), (708, 732, 320, 724),
    (709, 731, 600, 723), (709, 708, 320, 723), (710, 735, 200, 724), (710, 736, 1280, 724),
    (711, 741, 400, 723), (711, 740, 200, 724), (713, 704, 520, 723), (714, 718, 520, 724),
    (720, 707, 920, 724), (720, 706, 600, 723), (727, 744, 280, 723), (730, 709, 200, 723),
    (733, 734, 560, 723), (734, 737, 640, 723), (734, 710, 520, 724), (737, 738, 400, 723),
    (738, 711, 400, 723), (744, 728, 200, 724), (744, 729, 280, 724), (709, 775, 0, "xfm"),
]

# ohm per mile (r, x) of one phase
LINE_CONFIGS = {721: (0.2926, 0.1973), 722: (0.4751, 0.2973), 723: (1.2936, 0.6713), 724: (2.0952, 0.7758)}

PV_NODES = (4, 7, 10, 13, 17, 20, 22, 23, 26, 28, 29, 30, 31, 32, 33, 34, 35, 36)
PV_RATING = {33: 350.0, 34: 350.0, 35: 300.0, 36: 300.0}
PV_DEFAULT_RATING = 200.0
CHAIN_NODES = (2, 5, 6, 7, 9, 10, 11, 13, 14, 16, 18, 19, 20, 21, 22, 24, 26, 27, 28, 29, 30, 32, 33, 35, 36)
PER_NODE = 15


def ieee37_lines(base_kva=1000.0, base_kv=4.8):
    """Lines renumbered breadth-first from the substation (children in label order).

    Returns (lines, labels) where ``labels[i]`` is the IEEE label of node i.
    """
    children = {}
    for frm, to, *_ in IEEE37_LINES:
        children.setdefault(frm, []).append(to)
    order, queue = [], deque([799])
    while queue:
        u = queue.popleft()
        order.append(u)
        queue.extend(sorted(children.get(u, [])))
    num = {lab: i for i, lab in enumerate(order)}
    z_base = base_kv**2 * 1000.0 / base_kva
    lines = []
    for frm, to, length, cfg in IEEE37_LINES:
        if cfg == "xfm":
            # 500 kVA, z = 0.09 + 1.81 % on its own rating
            r, x = (0.0009 * base_kva / 500 * z_base, 0.0181 * base_kva / 500 * z_base)
        else:
            rm, xm = LINE_CONFIGS[cfg]
            r, x = rm * length / 5280, xm * length / 5280
        lines.append({"from": num[frm], "to": num[to], "r_ohm": round(r, 6), "x_ohm": round(x, 6)})
    lines.sort(key=lambda ln: ln["to"])
    return lines, order


def ieee37_scenario(seed=2012):
    """Documents (scenario, feeder, roster) of the flagship 37-node scenario."""
    rng = np.random.default_rng(seed)
    lines, labels = ieee37_lines()
    n = len(lines)
    feeder = {
        "base_kva": 1000.0, "base_kv": 4.8, "substation_voltage": 1.02,
        "lines": lines,
        "voltage_limits": {"lower": 0.95, "upper": 1.05, "lower_tight": 0.965, "upper_tight": 1.035},
        "linearization": "magnitude",
        "labels": labels[1:],
    }
    devices = []
    for node in PV_NODES:
        devices.append({"name": f"pv{node}", "class": "pv", "node": node,
                        "params": {"eta": PV_RATING.get(node, PV_DEFAULT_RATING), "c_p": 1e-3, "c_q": 5e-4}})
    for node in CHAIN_NODES:
        for d in range(PER_NODE):
            devices.append({
                "name": f"ac{node}_{d}", "class": "hvac", "node": node,
                "params": {"zeta1": 0.1, "zeta2": round(float(rng.uniform(-1.1, -0.9)), 4), "p_on": 4.0,
                           "T_min": 70.0, "T_max": 80.0, "T_nom": 75.0, "c_t": 0.05, "zeta_out": 0.1},
                "initial_state": round(float(rng.uniform(73.0, 77.0)), 2), "period": 900, "phase": 60 * d,
            })
    for node in CHAIN_NODES:
        for d in range(PER_NODE):
            devices.append({
                "name": f"bat{node}_{d}", "class": "battery", "node": node,
                "params": {"capacity": 20.0, "rates": [round(float(rng.uniform(-4.4, -3.6)), 3), 0.0, 4.0],
                           "soc_min": 0.2, "soc_max": 0.8, "soc_nom": 0.5, "c_b": 20.0, "slot_hours": 0.25},
                "initial_state": round(float(rng.uniform(0.45, 0.55)), 3), "period": 900, "phase": 60 * d,
            })
    base_load = np.round(rng.uniform(20.0, 90.0, n), 1)
    scenario = {
        "name": "ieee37",
        "feeder": "feeder.json", "roster": "roster.json",
        "tick_seconds": 1.0, "ticks_per_slot": 900, "window": 3, "horizon": 49500, "seed": 7,
        "timeline": {"kind": "generator", "name": "feeder_day", "params": {
            "ticks": 52200, "seed": seed, "start_hour": 4.5, "base_load_kw": base_load.tolist(),
            "power_factor": 0.95, "load_min": 0.55, "load_peak_hour": 17.5, "load_peak_width": 4.5,
            "load_tau_s": 120.0, "load_noise": 0.08, "sunrise_hour": 6.0, "sunset_hour": 19.5,
            "clear_sky_exponent": 1.3, "cloud_events_per_hour": 1.5, "cloud_site_lag_s": 60,
            "cloud_max_duration_s": 600, "cloud_max_depth": 0.7, "pv_fraction": 0.95,
            "T_start": 73.0, "T_peak": 100.0, "T_end": 93.0, "T_peak_hour": 15.0,
        }},
        "solver": {"epsilon": 5.0e3, "phi": 0.0, "stop_delta": 1e-6, "max_iters": 10000, "inner_tol": 1e-8},
        "online": {"plant": "ac", "noise": 0.0, "record_every": 60, "guard": True, "reference": False},
    }
    return scenario, feeder, {"devices": devices}


def tutorial_scenario():
    """Two nodes, one PV and one battery, loose limits: no constraint ever binds."""
    feeder = {
        "base_kva": 1000.0, "base_kv": 4.8, "substation_voltage": 1.0,
        "lines": [{"from": 0, "to": 1, "r_ohm": 0.4, "x_ohm": 0.3}, {"from": 1, "to": 2, "r_ohm": 0.4, "x_ohm": 0.3}],
        "voltage_limits": {"lower": 0.9, "upper": 1.1},
        "linearization": "magnitude",
    }
    roster = {"devices": [
        {"name": "pv2", "class": "pv", "node": 2, "params": {"eta": 100.0, "c_p": 0.01, "c_q": 0.01}},
        {"name": "bat1", "class": "battery", "node": 1,
         "params": {"capacity": 20.0, "rates": [-4.0, 0.0, 4.0], "soc_min": 0.2, "soc_max": 0.8,
                    "soc_nom": 0.5, "c_b": 20.0, "slot_hours": 0.25},
         "initial_state": 0.5, "period": 1, "phase": 0},
    ]}
    scenario = {
        "name": "tutorial", "feeder": "feeder.json", "roster": "roster.json",
        "tick_seconds": 900.0, "ticks_per_slot": 1, "window": 1, "horizon": 8, "seed": 1,
        "timeline": {"kind": "csv", "path": "timeline.csv"},
        "solver": {"epsilon": 1.0, "phi": 0.0, "stop_delta": 1e-9, "max_iters": 1000, "inner_tol": 1e-10},
        "online": {"plant": "ac", "record_every": 1},
    }
    return scenario, feeder, roster


def tutorial_timeline_rows():
    header = ["tick", "load_p:1", "load_p:2", "load_q:1", "load_q:2", "pv:pv2", "T_out"]
    rows = []
    for t in range(9):
        rows.append([t, 30.0 + t, 20.0, 10.0, 6.0, round(60 + 10 * np.sin(t / 3), 4), 80.0])
    return header, rows


def four_node_scenario():
    """Four nodes with PV everywhere, slowly oscillating loads and PV, one-tick slots."""
    feeder = {
        "base_kva": 1000.0, "base_kv": 4.8, "substation_voltage": 1.0,
        "lines": [
            {"from": 0, "to": 1, "r_ohm": 0.8, "x_ohm": 0.6}, {"from": 1, "to": 2, "r_ohm": 0.8, "x_ohm": 0.6},
            {"from": 2, "to": 3, "r_ohm": 0.6, "x_ohm": 0.4}, {"from": 2, "to": 4, "r_ohm": 0.6, "x_ohm": 0.4},
        ],
        "voltage_limits": {"lower": 0.95, "upper": 1.02},
        "linearization": "magnitude",
    }
    roster = {"devices": [
        {"name": f"pv{i}", "class": "pv", "node": i, "params": {"eta": 500.0, "c_p": 0.002, "c_q": 0.002}}
        for i in range(1, 5)
    ] + [
        {"name": f"bat{i}", "class": "battery", "node": i,
         "params": {"capacity": 20.0, "rates": [-4.0, 0.0, 4.0], "soc_min": 0.2, "soc_max": 0.8,
                    "soc_nom": 0.5, "c_b": 5000.0, "slot_hours": 1 / 60},
         "initial_state": 0.5, "period": 1, "phase": 0}
        for i in (3, 4)
    ]}
    scenario = {
        "name": "four_node", "feeder": "feeder.json", "roster": "roster.json",
        "tick_seconds": 60.0, "ticks_per_slot": 1, "window": 1, "horizon": 2000, "seed": 3,
        "timeline": {"kind": "generator", "name": "sinusoid", "params": {
            "ticks": 2001, "period_ticks": 500.0, "load_kw": [60.0, 50.0, 40.0, 40.0], "load_amplitude": 0.2,
            "power_factor": 0.95, "pv_kw": [450.0, 450.0, 450.0, 450.0], "pv_amplitude": 0.05, "T_out": 85.0,
        }},
        "solver": {"epsilon": 950.0, "phi": 1.0e-3, "stop_delta": 1e-9, "max_iters": 20000, "inner_tol": 1e-10},
        "online": {"plant": "linear", "record_every": 1},
    }
    return scenario, feeder, roster


def write_bundle(name, docs, out_dir, timeline_rows=None):
    scenario, feeder, roster = docs
    d = os.path.join(out_dir, name)
    os.makedirs(d, exist_ok=True)
    for fname, doc in (("scenario.json", scenario), ("feeder.json", feeder), ("roster.json", roster)):
        with open(os.path.join(d, fname), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    if timeline_rows is not None:
        header, rows = timeline_rows
        with open(os.path.join(d, "timeline.csv"), "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(str(v) for v in r) + "\n")


def main(out_dir=None):
    out_dir = out_dir or os.path.join(os.path.dirname(__file__), "data")
    write_bundle("tutorial", tutorial_scenario(), out_dir, tutorial_timeline_rows())
    write_bundle("four_node", four_node_scenario(), out_dir)
    write_bundle("ieee37", ieee37_scenario(), out_dir)


if __name__ == "__main__":
    main()

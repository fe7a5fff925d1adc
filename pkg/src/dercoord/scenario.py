"""Scenario files: loading, validation, synthetic generators and run artifacts.

A scenario is a JSON document referencing a feeder file, a device roster file
and a timeline (CSV file or a named synthetic generator). File formats are
documented in the README. Errors name the offending file and the JSON path or
CSV line.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from . import __version__
from .agent import Population, check_reachability
from .coordinator import SolverConfig, WindowProblem
from .devices import BatteryParams, Device, HvacParams, PvParams
from .errors import (
    HorizonMismatchError,
    InfeasibleBandError,
    SchemaError,
    ScenarioInfeasibleError,
)
from .grid import ConstraintSpec, LinearGridModel
from .online import OnlineConfig, OnlineEngine, ScenarioTimeline, window_devices, window_problem
from .plant import FeederPhysical, linearize

BUNDLED = ("tutorial", "four_node", "ieee37")


def bundled_path(name: str) -> str:
    """Path of a bundled scenario's scenario.json."""
    if name not in BUNDLED:
        raise SchemaError(f"unknown bundled scenario {name!r} (choose from {', '.join(BUNDLED)})")
    return str(resources.files("dercoord") / "data" / name / "scenario.json")


# -- small validation helpers ------------------------------------------------


class _Doc:
    """Typed access to a JSON document that reports file and JSON path on errors."""

    def __init__(self, obj, source, path="$"):
        self.obj, self.source, self.path = obj, source, path

    def _err(self, msg, key=None):
        loc = self.path if key is None else f"{self.path}.{key}"
        return SchemaError(msg, self.source, loc)

    def has(self, key):
        return isinstance(self.obj, dict) and key in self.obj

    def sub(self, key, default=None):
        if not self.has(key):
            if default is not None:
                return _Doc(default, self.source, f"{self.path}.{key}")
            raise self._err("missing required key", key)
        return _Doc(self.obj[key], self.source, f"{self.path}.{key}")

    def num(self, key, default=None, positive=False, integer=False):
        if not self.has(key):
            if default is None:
                raise self._err("missing required number", key)
            return default
        val = self.obj[key]
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise self._err(f"expected a finite number, got {val!r}", key)
        if integer and int(val) != val:
            raise self._err(f"expected an integer, got {val!r}", key)
        if positive and val <= 0:
            raise self._err(f"must be positive, got {val!r}", key)
        return int(val) if integer else float(val)

    def text(self, key, default=None):
        if not self.has(key):
            if default is None:
                raise self._err("missing required string", key)
            return default
        val = self.obj[key]
        if not isinstance(val, str):
            raise self._err(f"expected a string, got {val!r}", key)
        return val

    def items(self, key):
        d = self.sub(key)
        if not isinstance(d.obj, list):
            raise d._err("expected a list")
        return [_Doc(v, self.source, f"{d.path}[{i}]") for i, v in enumerate(d.obj)]

    def numbers(self, key):
        d = self.sub(key)
        if not isinstance(d.obj, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in d.obj
        ):
            raise d._err("expected a list of finite numbers")
        return [float(v) for v in d.obj]

    def check(self, cond, msg, key=None):
        if not cond:
            raise self._err(msg, key)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaError("file not found", path) from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", path, f"line {exc.lineno}") from None


# -- feeder and roster ---------------------------------------------------------


def parse_feeder(doc: dict, source="feeder"):
    """Return (FeederPhysical, ConstraintSpec, linearization quantity)."""
    d = _Doc(doc, source)
    lines = d.items("lines")
    n = len(lines)
    d.check(n >= 1, "a feeder needs at least one line", "lines")
    parents = np.zeros(n, dtype=int)
    r = np.zeros(n)
    x = np.zeros(n)
    seen = set()
    for ln in lines:
        to = ln.num("to", integer=True)
        frm = ln.num("from", integer=True)
        ln.check(1 <= to <= n, f"'to' must be a node in 1..{n}", "to")
        ln.check(0 <= frm <= n and frm != to, f"'from' must be a different node in 0..{n}", "from")
        ln.check(to not in seen, f"node {to} has two feeding lines (not a radial tree)", "to")
        seen.add(to)
        parents[to - 1] = frm
        r[to - 1] = ln.num("r_ohm", positive=True)
        x[to - 1] = ln.num("x_ohm", positive=True)
    try:
        feeder = FeederPhysical(
            parents, r, x, d.num("substation_voltage", 1.0), d.num("base_kva", positive=True),
            d.num("base_kv", positive=True),
        )
    except ValueError as exc:
        raise SchemaError(str(exc), source, "$.lines") from None
    lim = d.sub("voltage_limits")
    lower, upper = lim.num("lower"), lim.num("upper")
    lim.check(lower < upper, "lower limit must be below the upper limit")
    kw = {}
    if lim.has("lower_tight") or lim.has("upper_tight"):
        kw = dict(lower_tight=lim.num("lower_tight"), upper_tight=lim.num("upper_tight"))
    try:
        spec = ConstraintSpec.uniform(n, lower, upper, **kw)
    except ValueError as exc:
        raise SchemaError(str(exc), source, "$.voltage_limits") from None
    quantity = d.text("linearization", "magnitude")
    d.check(quantity in ("magnitude", "squared"), "linearization must be 'magnitude' or 'squared'", "linearization")
    return feeder, spec, quantity


def parse_roster(doc: dict, node_count: int, coarse_slots: int, source="roster"):
    """Devices with placeholder series of ``coarse_slots`` entries (filled from the timeline)."""
    d = _Doc(doc, source)
    devices = []
    names = set()
    for dev in d.items("devices"):
        name = dev.text("name")
        dev.check(name not in names, f"duplicate device name {name!r}", "name")
        names.add(name)
        node = dev.num("node", integer=True)
        dev.check(1 <= node <= node_count, f"node must lie in 1..{node_count}", "node")
        cls = dev.text("class")
        prm = dev.sub("params")
        try:
            if cls == "pv":
                params = PvParams(np.zeros(coarse_slots), prm.num("eta"), prm.num("c_p"), prm.num("c_q"))
                x0 = None
            elif cls == "hvac":
                params = HvacParams(
                    prm.num("zeta1"), prm.num("zeta2"), prm.num("p_on"), np.zeros(coarse_slots),
                    prm.num("T_min"), prm.num("T_max"), prm.num("T_nom"), prm.num("c_t"),
                    prm.num("zeta_out") if prm.has("zeta_out") else None,
                )
                x0 = dev.num("initial_state")
            elif cls == "battery":
                params = BatteryParams(
                    prm.num("capacity"), prm.numbers("rates"), prm.num("soc_min"), prm.num("soc_max"),
                    prm.num("soc_nom"), prm.num("c_b"), prm.num("slot_hours"),
                )
                x0 = dev.num("initial_state")
            else:
                raise dev._err(f"unknown device class {cls!r} (pv, hvac or battery)", "class")
            devices.append(Device(
                name, node, params, x0, dev.num("period", 1, integer=True), dev.num("phase", 0, integer=True)
            ))
        except ValueError as exc:
            raise SchemaError(str(exc), source, dev.path) from None
    return devices


def device_to_json(d: Device) -> dict:
    p = d.params
    out = {"name": d.name, "class": d.kind, "node": d.node}
    if isinstance(p, PvParams):
        out["params"] = {"eta": p.eta, "c_p": p.c_p, "c_q": p.c_q}
    elif isinstance(p, HvacParams):
        out["params"] = {
            "zeta1": p.zeta1, "zeta2": p.zeta2, "p_on": p.p_on, "T_min": p.T_min, "T_max": p.T_max,
            "T_nom": p.T_nom, "c_t": p.c_t, "zeta_out": p.zeta_out,
        }
    else:
        out["params"] = {
            "capacity": p.capacity, "rates": [float(v) for v in p.rates], "soc_min": p.soc_min,
            "soc_max": p.soc_max, "soc_nom": p.soc_nom, "c_b": p.c_b, "slot_hours": p.slot_hours,
        }
    if d.x0 is not None:
        out["initial_state"] = d.x0
    out["period"] = d.period
    out["phase"] = d.phase
    return out


# -- timelines ------------------------------------------------------------------


def read_timeline_csv(path, node_count, pv_names, base_kva, tick_seconds):
    """Timeline CSV: columns tick, load_p:<node>, load_q:<node>, pv:<device>, T_out.

    Loads are consumption in kW/kvar; they are stored as p.u. injections.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError("file not found", path) from None
    with fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SchemaError("empty timeline", path, "line 1")
    header = rows[0]
    need = (["tick"] + [f"load_p:{i}" for i in range(1, node_count + 1)]
            + [f"load_q:{i}" for i in range(1, node_count + 1)] + [f"pv:{n}" for n in pv_names] + ["T_out"])
    missing = [c for c in need if c not in header]
    if missing:
        raise SchemaError(f"missing columns {missing[:5]}", path, "line 1")
    col = {c: header.index(c) for c in need}
    data = np.empty((len(rows) - 1, len(need)))
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise HorizonMismatchError(f"row has {len(row)} fields, header has {len(header)}", path, f"line {ln}")
        try:
            data[ln - 2] = [float(row[col[c]]) for c in need]
        except ValueError:
            raise SchemaError("non-numeric value", path, f"line {ln}") from None
    if not np.array_equal(data[:, 0], np.arange(data.shape[0])):
        bad = int(np.flatnonzero(data[:, 0] != np.arange(data.shape[0]))[0])
        raise HorizonMismatchError("ticks must run 0, 1, 2, ... without gaps", path, f"line {bad + 2}")
    N = node_count
    load_p = data[:, 1 : 1 + N]
    load_q = data[:, 1 + N : 1 + 2 * N]
    pv = data[:, 1 + 2 * N : 1 + 2 * N + len(pv_names)]
    return ScenarioTimeline(-load_p / base_kva, -load_q / base_kva, pv, data[:, -1], tick_seconds)


def write_timeline_csv(path, timeline: ScenarioTimeline, pv_names, base_kva):
    N = timeline.p0.shape[1]
    header = (["tick"] + [f"load_p:{i}" for i in range(1, N + 1)] + [f"load_q:{i}" for i in range(1, N + 1)]
              + [f"pv:{n}" for n in pv_names] + ["T_out"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(timeline.ticks):
            w.writerow([t] + [repr(float(v)) for v in (-timeline.p0[t] * base_kva)]
                       + [repr(float(v)) for v in (-timeline.q0[t] * base_kva)]
                       + [repr(float(v)) for v in timeline.pv_avail[t]] + [repr(float(timeline.T_out[t]))])


def sinusoid_timeline(gen: _Doc, node_count, pv_devices, base_kva, tick_seconds):
    """Slow sinusoidal drift of loads and PV availability around constant levels."""
    T = gen.num("ticks", integer=True, positive=True)
    period = gen.num("period_ticks", positive=True)
    load = np.array(gen.numbers("load_kw"))
    gen.check(load.size == node_count, f"load_kw needs {node_count} entries", "load_kw")
    amp = gen.num("load_amplitude", 0.0)
    pf_tan = math.tan(math.acos(gen.num("power_factor", 0.95)))
    pv_level = np.array(gen.numbers("pv_kw")) if gen.has("pv_kw") else np.zeros(len(pv_devices))
    gen.check(pv_level.size == len(pv_devices), f"pv_kw needs {len(pv_devices)} entries", "pv_kw")
    pv_amp = gen.num("pv_amplitude", 0.0)
    t = np.arange(T)
    phase = 2 * np.pi * t / period
    shape = 1 + amp * np.sin(phase)
    lp = load[None, :] * shape[:, None]
    pv = np.maximum(0.0, pv_level[None, :] * (1 + pv_amp * np.sin(phase + 0.5))[:, None])
    T_out = np.full(T, gen.num("T_out", 85.0))
    return ScenarioTimeline(-lp / base_kva, -lp * pf_tan / base_kva, pv, T_out, tick_seconds)


def feeder_day_timeline(gen: _Doc, node_count, pv_devices, base_kva, tick_seconds):
    """Synthetic summer day: load, PV irradiance with cloud transients and ambient temperature.

    Loads follow a smooth daily profile with first-order autoregressive
    fluctuations (time constant ``load_tau_s``); PV follows a clear-sky bell
    between sunrise and sunset modulated by random cloud events shared across
    sites with per-site delays. All randomness comes from ``seed``.
    """
    T = gen.num("ticks", integer=True, positive=True)
    rng = np.random.default_rng(gen.num("seed", integer=True))
    h = gen.num("start_hour") + np.arange(T) * tick_seconds / 3600.0
    base = np.array(gen.numbers("base_load_kw"))
    gen.check(base.size == node_count, f"base_load_kw needs {node_count} entries", "base_load_kw")
    pf_tan = math.tan(math.acos(gen.num("power_factor", 0.95)))
    # daily load profile: morning plateau rising to an early-evening peak
    shape = gen.num("load_min", 0.55) + (1 - gen.num("load_min", 0.55)) * np.exp(
        -(((h - gen.num("load_peak_hour", 17.5)) / gen.num("load_peak_width", 4.5)) ** 2)
    )
    a = math.exp(-tick_seconds / gen.num("load_tau_s", 120.0))
    noise = rng.standard_normal((T, node_count)) * math.sqrt(1 - a * a)
    ar = lfilter([1.0], [1.0, -a], noise, axis=0)
    lp = base[None, :] * shape[:, None] * (1 + gen.num("load_noise", 0.08) * ar)
    lp = np.maximum(lp, 0.0)
    # clear-sky bell
    rise, fall = gen.num("sunrise_hour", 6.0), gen.num("sunset_hour", 19.5)
    clear = np.clip(np.sin(np.pi * (h - rise) / (fall - rise)), 0.0, None) ** gen.num("clear_sky_exponent", 1.3)
    clear = np.where((h > rise) & (h < fall), clear, 0.0)
    # cloud events: Poisson arrivals, each a smooth dip of random depth and duration
    n_pv = len(pv_devices)
    cloud = np.ones((T, n_pv))
    rate = gen.num("cloud_events_per_hour", 1.5) * tick_seconds / 3600.0
    starts = np.flatnonzero(rng.random(T) < rate)
    lags = rng.integers(0, int(gen.num("cloud_site_lag_s", 60) / tick_seconds) + 1, n_pv)
    for s in starts:
        dur = rng.uniform(60, gen.num("cloud_max_duration_s", 600)) / tick_seconds
        depth = rng.uniform(0.2, gen.num("cloud_max_depth", 0.7))
        span = int(dur)
        bump = depth * np.sin(np.pi * np.arange(span) / span) ** 2
        for j in range(n_pv):
            lo = s + lags[j]
            hi = min(T, lo + span)
            if lo < T:
                cloud[lo:hi, j] *= 1 - bump[: hi - lo]
    rating = np.array([eta for _, eta in pv_devices])
    pv = gen.num("pv_fraction", 0.95) * rating[None, :] * clear[:, None] * cloud
    # ambient temperature: rises to a mid-afternoon peak, then eases
    t_lo, t_hi, t_end = gen.num("T_start", 73.0), gen.num("T_peak", 100.0), gen.num("T_end", 93.0)
    peak_h, h0, h1 = gen.num("T_peak_hour", 15.0), h[0], h[-1]
    T_out = np.where(
        h <= peak_h,
        t_lo + (t_hi - t_lo) * np.sin(0.5 * np.pi * np.clip((h - h0) / (peak_h - h0), 0, 1)),
        t_hi + (t_end - t_hi) * np.clip((h - peak_h) / max(h1 - peak_h, 1e-9), 0, 1),
    )
    return ScenarioTimeline(-lp / base_kva, -lp * pf_tan / base_kva, pv, T_out, tick_seconds)


GENERATORS = {"sinusoid": sinusoid_timeline, "feeder_day": feeder_day_timeline}


# -- scenario --------------------------------------------------------------------------


@dataclass
class Scenario:
    """A fully validated scenario."""

    name: str
    feeder: FeederPhysical
    model: LinearGridModel
    spec: ConstraintSpec
    devices: list
    timeline: ScenarioTimeline
    solver: SolverConfig
    online: OnlineConfig
    horizon: int
    seed: int
    source: str
    docs: dict = field(repr=False, default_factory=dict)
    digest: str = ""

    @property
    def slots(self) -> int:
        return self.online.window + 1

    @property
    def ticks_per_slot(self) -> int:
        return self.online.ticks_per_slot

    def window_problem(self, t: int = 0, states=None) -> WindowProblem:
        return window_problem(
            self.model, self.spec, self.devices, self.timeline, t, self.slots, self.ticks_per_slot, states
        )

    def engine(self, start: int = 0, **overrides) -> OnlineEngine:
        """Online engine at tick ``start``; keyword overrides replace OnlineConfig fields."""
        cfg = replace(self.online, **overrides) if overrides else self.online
        return OnlineEngine(
            self.model, self.spec, self.devices, self.timeline, cfg, self.seed, self.feeder, start=start
        )

    def counts(self) -> dict:
        kinds = [d.kind for d in self.devices]
        return {k: kinds.count(k) for k in ("pv", "hvac", "battery")}


OVERRIDE_KEYS = ("seed", "epsilon", "phi", "window", "horizon", "strict", "tick_seconds", "ticks_per_slot")


def load_scenario(path: str, overrides: Optional[dict] = None) -> Scenario:
    """Load and validate a scenario; ``path`` may also name a bundled scenario."""
    if path in BUNDLED and not os.path.exists(path):
        path = bundled_path(path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(overrides) - set(OVERRIDE_KEYS)
    if unknown:
        raise SchemaError(f"unknown overrides {sorted(unknown)}")
    root = os.path.dirname(os.path.abspath(path))
    sdoc_raw = _read_json(path)
    sdoc = _Doc(sdoc_raw, path)
    feeder_path = os.path.join(root, sdoc.text("feeder"))
    roster_path = os.path.join(root, sdoc.text("roster"))
    fdoc_raw, rdoc_raw = _read_json(feeder_path), _read_json(roster_path)
    feeder, spec, quantity = parse_feeder(fdoc_raw, feeder_path)
    model = linearize(feeder, quantity)
    N = feeder.node_count

    tick_seconds = float(overrides.get("tick_seconds", sdoc.num("tick_seconds", positive=True)))
    m = int(overrides.get("ticks_per_slot", sdoc.num("ticks_per_slot", 1, integer=True)))
    w = int(overrides.get("window", sdoc.num("window", integer=True)))
    sdoc.check(m >= 1 and w >= 0, "ticks_per_slot must be >= 1 and window >= 0")
    horizon = int(overrides.get("horizon", sdoc.num("horizon", integer=True, positive=True)))
    seed = int(overrides.get("seed", sdoc.num("seed", 0, integer=True)))

    roster_probe = parse_roster(rdoc_raw, N, 1, roster_path)
    pv_devs = [(d.name, d.params.eta) for d in roster_probe if d.kind == "pv"]
    tdoc = sdoc.sub("timeline")
    kind = tdoc.text("kind")
    if kind == "csv":
        csv_path = os.path.join(root, tdoc.text("path"))
        timeline = read_timeline_csv(csv_path, N, [n for n, _ in pv_devs], feeder.base_kva, tick_seconds)
        tl_source = csv_path
    elif kind == "generator":
        gname = tdoc.text("name")
        tdoc.check(gname in GENERATORS, f"unknown generator {gname!r}", "name")
        timeline = GENERATORS[gname](tdoc.sub("params"), N, pv_devs, feeder.base_kva, tick_seconds)
        tl_source = f"{path}:$.timeline"
    else:
        raise tdoc._err(f"unknown timeline kind {kind!r} (csv or generator)", "kind")
    need = horizon + m * w
    if timeline.ticks < need:
        raise HorizonMismatchError(
            f"timeline has {timeline.ticks} ticks but horizon {horizon} with window {w} x {m} ticks needs {need}",
            tl_source, "timeline",
        )
    coarse = timeline.ticks // m
    devices = []
    pv_j = 0
    for d in parse_roster(rdoc_raw, N, coarse, roster_path):
        p = d.params
        if isinstance(p, PvParams):
            d = replace(d, params=replace(p, p_avail=timeline.pv_avail[: coarse * m : m, pv_j]))
            pv_j += 1
        elif isinstance(p, HvacParams):
            d = replace(d, params=replace(p, T_out=timeline.T_out[: coarse * m : m]))
        if d.discrete and d.period % m:
            raise SchemaError(f"device {d.name}: period must be a multiple of ticks_per_slot ({m})", roster_path)
        devices.append(d)

    sol = sdoc.sub("solver")
    eps = float(overrides.get("epsilon", sol.num("epsilon", positive=True)))
    phi = float(overrides.get("phi", sol.num("phi", 0.0)))
    sol.check(phi >= 0, "phi must be nonnegative", "phi")
    solver = SolverConfig(
        epsilon=eps, phi=phi, stop_delta=sol.num("stop_delta", 1e-6), max_iters=sol.num("max_iters", 10_000, integer=True),
        strict=bool(overrides.get("strict", False)), inner_tol=sol.num("inner_tol", 1e-8),
    )
    on = sdoc.sub("online", {})
    plant = on.text("plant", "ac")
    on.check(plant in ("ac", "linear"), "plant must be 'ac' or 'linear'", "plant")
    online = OnlineConfig(
        epsilon=eps, phi=phi, window=w, ticks_per_slot=m, inner_tol=solver.inner_tol,
        noise=on.num("noise", 0.0), plant=plant, record_every=on.num("record_every", 1, integer=True),
        guard=bool(on.obj.get("guard", True)) if isinstance(on.obj, dict) else True,
        reference=bool(on.obj.get("reference", False)) if isinstance(on.obj, dict) else False,
    )
    scn = Scenario(
        sdoc.text("name", os.path.basename(root)), feeder, model, spec, devices, timeline, solver, online,
        horizon, seed, path,
        docs={"scenario": sdoc_raw, "feeder": fdoc_raw, "roster": rdoc_raw},
    )
    h = hashlib.sha256()
    for key in ("scenario", "feeder", "roster"):
        h.update(json.dumps(scn.docs[key], sort_keys=True).encode())
    if kind == "csv":
        with open(csv_path, "rb") as fh:
            h.update(fh.read())
    scn.digest = h.hexdigest()
    # initial states must admit a feasible first window
    try:
        pop = Population(window_devices(devices, timeline, 0, w + 1, m), N, w + 1)
        if pop.chain.size:
            check_reachability(pop.chain)
    except InfeasibleBandError as exc:
        raise ScenarioInfeasibleError(str(exc), roster_path, f"device {exc.device}") from None
    return scn


def dump_scenario(scn: Scenario, out_dir: str) -> str:
    """Write scenario, feeder, roster and a CSV timeline; returns the scenario path."""
    os.makedirs(out_dir, exist_ok=True)
    fdoc = {
        "base_kva": scn.feeder.base_kva, "base_kv": scn.feeder.base_kv, "substation_voltage": scn.feeder.v0,
        "lines": [
            {"from": int(scn.feeder.parents[i]), "to": i + 1, "r_ohm": float(scn.feeder.r_ohm[i]),
             "x_ohm": float(scn.feeder.x_ohm[i])}
            for i in range(scn.feeder.node_count)
        ],
        "voltage_limits": {"lower": float(scn.spec.v_lower[0]), "upper": float(scn.spec.v_upper[0])},
        "linearization": scn.model.quantity,
    }
    if scn.spec.tightened:
        fdoc["voltage_limits"].update(
            lower_tight=float(scn.spec.v_lower_tight[0]), upper_tight=float(scn.spec.v_upper_tight[0])
        )
    rdoc = {"devices": [device_to_json(d) for d in scn.devices]}
    s = scn.solver
    sdoc = {
        "name": scn.name, "feeder": "feeder.json", "roster": "roster.json",
        "timeline": {"kind": "csv", "path": "timeline.csv"},
        "tick_seconds": scn.timeline.tick_seconds, "ticks_per_slot": scn.ticks_per_slot,
        "window": scn.online.window, "horizon": scn.horizon, "seed": scn.seed,
        "solver": {"epsilon": s.epsilon, "phi": s.phi, "stop_delta": s.stop_delta, "max_iters": s.max_iters,
                   "inner_tol": s.inner_tol},
        "online": {"plant": scn.online.plant, "noise": scn.online.noise, "record_every": scn.online.record_every,
                   "guard": scn.online.guard, "reference": scn.online.reference},
    }
    for name, doc in (("feeder.json", fdoc), ("roster.json", rdoc), ("scenario.json", sdoc)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    pv_names = [d.name for d in scn.devices if d.kind == "pv"]
    write_timeline_csv(os.path.join(out_dir, "timeline.csv"), scn.timeline, pv_names, scn.feeder.base_kva)
    return os.path.join(out_dir, "scenario.json")


# -- artifacts ---------------------------------------------------------------------------


def fmt(v) -> str:
    """Shortest round-trip text for a number."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_columns(path: str, header: dict, names, rows) -> None:
    """Columnar text: '# key: value' header lines, a CSV header row, then data rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}: {v}\n")
        fh.write(",".join(names) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_columns(path: str):
    """Inverse of :func:`write_columns`: (header dict, column names, float array)."""
    header, data, names = {}, [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                header[k] = v
            elif names is None:
                names = line.split(",")
            elif line:
                data.append([float(x) for x in line.split(",")])
    arr = np.array(data, dtype=float).reshape(-1, len(names or []))
    return header, names, arr


@dataclass
class RunManifest:
    scenario: str
    scenario_sha256: str
    mode: str
    seed: int
    config: dict
    version: str = __version__
    outputs: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

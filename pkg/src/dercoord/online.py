"""Online asynchronous receding-horizon engine.

One engine tick is one algorithm iteration. The look-ahead window has w + 1
blocks; block k covers the time ``t + k * ticks_per_slot``. With
``ticks_per_slot == 1`` every tick is a full slot and the multiplier window is
shifted by one block per tick. With a coarser prediction grid (for example
1 s ticks and 15 min blocks) the blocks are offsets relative to the current
tick and the window slides continuously, so no block shift is needed.

A/Cs and batteries advance their state once per block length, at ticks
congruent to their phase, and re-plan at ticks congruent to their phase modulo
their update period. Between updates they hold their drawn setpoint and their
relative plan. PV inverters re-plan every tick.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .agent import DeviceStreams, Population, PvFleet, bracket, solve_chain, solve_pv
from .coordinator import DualState, SolverConfig, WindowProblem, run_offline, signal_arrays
from .devices import Device, HvacParams, PvParams
from .errors import DimensionError, HorizonMismatchError
from .grid import ConstraintSpec, LinearGridModel, constraint_jacobian, constraint_value
from .plant import FeederPhysical, solve_ac


@dataclass(frozen=True)
class ScenarioTimeline:
    """Exogenous inputs at tick resolution.

    ``p0``/``q0``: uncontrollable nodal injections (T, N) in p.u.;
    ``pv_avail``: available PV power (T, n_pv) in kW, one column per PV device
    in roster order; ``T_out``: ambient temperature (T,) in degrees F.
    """

    p0: np.ndarray
    q0: np.ndarray
    pv_avail: np.ndarray
    T_out: np.ndarray
    tick_seconds: float = 1.0

    def __post_init__(self):
        p0 = np.atleast_2d(np.asarray(self.p0, dtype=float))
        q0 = np.atleast_2d(np.asarray(self.q0, dtype=float))
        pv = np.asarray(self.pv_avail, dtype=float)
        if pv.ndim == 1:
            pv = pv[:, None]
        T_out = np.asarray(self.T_out, dtype=float).reshape(-1)
        T = p0.shape[0]
        if q0.shape != p0.shape:
            raise HorizonMismatchError("q0 does not match p0", "timeline", "q0")
        if pv.shape[0] != T and pv.size:
            raise HorizonMismatchError(f"pv_avail has {pv.shape[0]} ticks, p0 has {T}", "timeline", "pv_avail")
        if T_out.shape[0] != T:
            raise HorizonMismatchError(f"T_out has {T_out.shape[0]} ticks, p0 has {T}", "timeline", "T_out")
        for name, val in (("p0", p0), ("q0", q0), ("pv_avail", pv), ("T_out", T_out)):
            if not np.all(np.isfinite(val)):
                raise ValueError(f"timeline series {name} must be finite")
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        if np.any(pv < 0):
            raise ValueError("pv_avail must be nonnegative")

    @property
    def ticks(self) -> int:
        return self.p0.shape[0]


@dataclass(frozen=True)
class TimeWindow:
    start: int
    length: int
    tick_seconds: float = 1.0
    ticks_per_slot: int = 1

    def __post_init__(self):
        if self.length < 1 or self.ticks_per_slot < 1:
            raise ValueError("window length and ticks_per_slot must be >= 1")

    @property
    def w(self) -> int:
        return self.length - 1

    def block_ticks(self) -> np.ndarray:
        return self.start + self.ticks_per_slot * np.arange(self.length)


def shift_block(arr: np.ndarray, axis: int = 0) -> np.ndarray:
    """Drop the first block along ``axis``, shift the rest forward and copy the last."""
    arr = np.asarray(arr)
    n = arr.shape[axis]
    idx = np.minimum(np.arange(1, n + 1), n - 1)
    return np.take(arr, idx, axis=axis)


def shift_window(window: TimeWindow, mu: DualState):
    """Advance the window by one tick; in slot mode also shift the multiplier blocks."""
    new = replace(window, start=window.start + 1)
    if window.ticks_per_slot == 1:
        return new, DualState(shift_block(mu.mu, 0), mu.k)
    return new, DualState(mu.mu.copy(), mu.k)


@dataclass(frozen=True)
class AsyncSchedule:
    period: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        per = np.asarray(self.period, dtype=int)
        ph = np.asarray(self.phase, dtype=int)
        if per.shape != ph.shape or np.any(per < 1) or np.any(ph < 0) or np.any(ph >= per):
            raise ValueError("need period >= 1 and 0 <= phase < period for every device")
        object.__setattr__(self, "period", per)
        object.__setattr__(self, "phase", ph)

    @classmethod
    def from_devices(cls, devices: Sequence[Device]):
        return cls([d.period for d in devices], [d.phase for d in devices])


def active_set(schedule: AsyncSchedule, t: int) -> np.ndarray:
    """Indices of devices with (t - phase) mod period == 0."""
    return np.flatnonzero((t - schedule.phase) % schedule.period == 0)


@dataclass(frozen=True)
class OnlineConfig:
    """Engine settings.

    ``guard`` re-picks the other end of the randomization bracket when the
    drawn setpoint would push a state outside its band at the next step
    while the other end would not. ``relax_bands`` widens unreachable state
    bands to the nearest reachable point instead of aborting.
    ``record_every`` controls how often per-node and per-device snapshots
    are stored; per-tick summaries are always stored.
    """

    epsilon: float
    phi: float = 0.0
    window: int = 0
    ticks_per_slot: int = 1
    inner_tol: float = 1e-8
    inner_max_iter: int = 10_000
    iterations_per_tick: int = 1
    noise: float = 0.0
    plant: str = "ac"
    record_every: int = 1
    guard: bool = True
    relax_bands: bool = True
    reference: bool = False
    reference_tol: float = 1e-8
    reference_max_iters: int = 200_000

    def __post_init__(self):
        if not self.epsilon > 0 or self.phi < 0 or self.window < 0:
            raise ValueError("need epsilon > 0, phi >= 0, window >= 0")
        if self.plant not in ("ac", "linear"):
            raise ValueError("plant must be 'ac' or 'linear'")
        if self.record_every < 1 or self.iterations_per_tick < 1:
            raise ValueError("record_every and iterations_per_tick must be >= 1")


SUMMARY_FIELDS = (
    "tick", "vmax", "vmin", "vmax_pred", "gmax", "mu_norm", "alpha_max",
    "n_active", "n_guard", "var_g", "pv_p", "chain_p",
)


@dataclass
class OnlineTrace:
    """Append-only run record.

    ``summary`` holds one row per tick (columns ``SUMMARY_FIELDS``).
    ``snapshots`` holds per-node and per-device arrays every ``record_every``
    ticks. ``reference`` holds per-tick reference annotations when enabled.
    Every current-slot constraint value is tagged with its provenance ("meas"
    for plant measurements, "pred" for the linear model).
    """

    summary: List[tuple] = field(default_factory=list)
    snapshots: dict = field(default_factory=lambda: {
        "tick": [], "v": [], "mu0": [], "alpha0": [], "p_applied": [], "states": [],
    })
    reference: dict = field(default_factory=lambda: {
        "tick": [], "mu": [], "mu_star": [], "grad": [], "grad_star": [], "g_meas": [], "g_pred": [], "var_g": [],
    })
    provenance: List[str] = field(default_factory=list)
    guard_overrides: int = 0

    def summary_array(self) -> np.ndarray:
        return np.array(self.summary, dtype=float).reshape(-1, len(SUMMARY_FIELDS))

    def column(self, name) -> np.ndarray:
        return self.summary_array()[:, SUMMARY_FIELDS.index(name)]

    def reference_arrays(self) -> dict:
        return {k: np.array(v) for k, v in self.reference.items()}


class OnlineEngine:
    """Stateful engine; call :meth:`step` once per tick or :meth:`run`."""

    def __init__(
        self,
        model: LinearGridModel,
        spec: ConstraintSpec,
        devices: Sequence[Device],
        timeline: ScenarioTimeline,
        cfg: OnlineConfig,
        seed: int = 0,
        feeder: Optional[FeederPhysical] = None,
        start: int = 0,
    ):
        if cfg.plant == "ac" and feeder is None:
            raise ValueError("the AC plant needs the physical feeder")
        self.model, self.spec, self.cfg, self.feeder = model, spec, cfg, feeder
        self.devices = list(devices)
        self.timeline = timeline
        self.seed = seed
        N = model.node_count
        if timeline.p0.shape[1] != N:
            raise DimensionError("timeline node count differs from the model")
        self.S = cfg.window + 1
        self.m = cfg.ticks_per_slot
        self.pop = self._population()
        self.schedule = AsyncSchedule.from_devices(self.devices)
        if self.pop.pv.size != timeline.pv_avail.shape[1] and self.pop.pv.size:
            raise HorizonMismatchError(
                f"timeline has {timeline.pv_avail.shape[1]} PV series for {self.pop.pv.size} PV devices",
                "timeline", "pv_avail",
            )
        for i in self.pop.chain_rows:
            d = self.devices[i]
            if d.period % self.m:
                raise ValueError(f"device {d.name}: update period must be a multiple of ticks_per_slot")
        self.streams = DeviceStreams(seed, len(self.devices))
        self.jp, self.jq = constraint_jacobian(spec, model)
        self.M = self.jp.shape[0]
        n = len(self.devices)
        self.t = int(start)
        self.mu = np.zeros((self.S, self.M))
        self.plan_p = np.zeros((n, self.S))
        self.plan_q = np.zeros((n, self.S))
        self.applied_p = np.zeros(n)
        self.applied_q = np.zeros(n)
        ch = self.pop.chain
        self.x = ch.x0.copy()
        self.x_min = self.x.copy()
        self.x_max = self.x.copy()
        ch.lam = np.zeros((ch.size, self.S))
        self._chain_pos = {int(r): j for j, r in enumerate(self.pop.chain_rows)}
        self.kind_hvac = np.array([isinstance(self.devices[i].params, HvacParams) for i in self.pop.chain_rows])
        self.zeta_out = np.array(
            [self.devices[i].params.zeta_out if self.kind_hvac[j] else 0.0 for j, i in enumerate(self.pop.chain_rows)]
        )
        self.chain_phase = np.array([self.devices[i].phase % self.m for i in self.pop.chain_rows], dtype=int)
        self.step_drift = np.zeros(ch.size)
        # a device's state starts evolving at its first step boundary
        self.in_step = np.zeros(ch.size, dtype=bool)
        self.trace = OnlineTrace()
        self._ref_mu = None
        self._mu_entering = self.mu.copy()

    def _population(self):
        # exogenous series come from the timeline, so device series are replaced by placeholders
        pop = Population([self._shadow(d) for d in self.devices], self.model.node_count, self.S)
        pop.devices = self.devices
        return pop

    def _shadow(self, d: Device) -> Device:
        p = d.params
        if isinstance(p, PvParams):
            return replace(d, params=replace(p, p_avail=np.zeros(self.S)))
        if isinstance(p, HvacParams):
            return replace(d, params=replace(p, T_out=np.zeros(self.S)))
        return d

    # -- exogenous data ---------------------------------------------------

    def block_ticks(self, t=None) -> np.ndarray:
        t = self.t if t is None else t
        return t + self.m * np.arange(self.S)

    def _check_horizon(self, t):
        last = t + self.m * (self.S - 1)
        if last >= self.timeline.ticks:
            raise HorizonMismatchError(
                f"window at tick {t} needs data up to tick {last}, timeline ends at {self.timeline.ticks - 1}",
                "timeline",
            )

    def _load_window(self, t):
        bt = self.block_ticks(t)
        tl = self.timeline
        if self.pop.pv.size:
            self.pop.pv.p_avail[:] = tl.pv_avail[bt].T
        if self.pop.chain.size:
            self.pop.chain.b[:] = self.zeta_out[:, None] * tl.T_out[bt][None, :]
        return tl.p0[bt], tl.q0[bt]

    # -- one tick -----------------------------------------------------------

    def step(self):
        """Run one tick ([S1]-[S7]) and append its records to the trace."""
        cfg, pop, t = self.cfg, self.pop, self.t
        self._check_horizon(t)
        p0w, q0w = self._load_window(t)
        ch = pop.chain
        # [S1] chain devices at a step boundary advance their state with the held setpoint
        if ch.size:
            boundary = (t - self.chain_phase) % self.m == 0
            moved = boundary & self.in_step
            if np.any(moved):
                held = self.applied_p[pop.chain_rows]
                self.x = np.where(moved, ch.a * self.x + self.step_drift + ch.k * held, self.x)
                self.x_min = np.minimum(self.x_min, self.x)
                self.x_max = np.maximum(self.x_max, self.x)
            self.step_drift = np.where(boundary, ch.b[:, 0], self.step_drift)
            self.in_step |= boundary
            ch.x0[:] = self.x
        active = active_set(self.schedule, t)
        self._mu_entering = self.mu.copy()
        n_guard = 0
        var_g = 0.0
        for _ in range(cfg.iterations_per_tick):
            n_guard, var_g, g_meas, g_pred, v, yhat = self._iterate(active, p0w, q0w)
        if cfg.reference:
            self._annotate_reference(g_meas, g_pred, var_g)
        self._record(active, v, yhat, g_meas, n_guard, var_g)
        # [S7] window shift
        if self.m == 1:
            self.mu = shift_block(self.mu, 0)
            self.plan_p = shift_block(self.plan_p, 1)
            self.plan_q = shift_block(self.plan_q, 1)
            if ch.size and ch.lam is not None:
                ch.lam = shift_block(ch.lam, 1)
        self.t += 1

    def _iterate(self, active, p0w, q0w):
        cfg, pop = self.cfg, self.pop
        alpha, beta = signal_arrays(self.model, self.spec, self.mu)
        alpha_d, beta_d = alpha[:, pop.nodes - 1].T, beta[:, pop.nodes - 1].T
        is_active = np.zeros(len(self.devices), dtype=bool)
        is_active[active] = True
        # [S2] PV devices in the active set re-plan
        if pop.pv.size:
            rows = pop.pv_rows
            sel = is_active[rows]
            if np.any(sel):
                p, q = solve_pv(_pv_subset(pop.pv, sel), alpha_d[rows[sel]], beta_d[rows[sel]])
                self.plan_p[rows[sel]], self.plan_q[rows[sel]] = p, q
                self.applied_p[rows[sel]] = p[:, 0]
                self.applied_q[rows[sel]] = q[:, 0]
        n_guard = 0
        var_g = 0.0
        ch = pop.chain
        if ch.size:
            sel = np.flatnonzero(is_active[pop.chain_rows])
            if sel.size:
                sub = ch.subset(sel)
                rows = pop.chain_rows[sel]
                p, _ = solve_chain(
                    sub, alpha_d[rows], tol=cfg.inner_tol, max_iter=cfg.inner_max_iter,
                    relax=cfg.relax_bands, check=True,
                )
                ch.lam[sel] = sub.lam
                self.plan_p[rows] = p
                self.plan_q[rows] = 0.0
                lo, hi, prob = bracket(p[:, 0], sub.setpoints)
                u = self.streams.draw(rows)
                drawn = np.where(u < prob, hi, lo)
                if cfg.guard:
                    nxt = lambda val: sub.a * sub.x0 + sub.b[:, 0] + sub.k * val
                    band_lo, band_hi = sub.lo[:, 0], sub.hi[:, 0]
                    bad = (nxt(drawn) < band_lo - 1e-9) | (nxt(drawn) > band_hi + 1e-9)
                    other = np.where(drawn == hi, lo, hi)
                    ok_other = (nxt(other) >= band_lo - 1e-9) & (nxt(other) <= band_hi + 1e-9)
                    swap = bad & ok_other
                    drawn = np.where(swap, other, drawn)
                    n_guard = int(swap.sum())
                    self.trace.guard_overrides += n_guard
                self.applied_p[rows] = drawn
                self.applied_q[rows] = 0.0
                r_dev = self.jp[:, pop.nodes[rows] - 1] / self.model.base_kva
                var_g = float(np.sum((r_dev**2) @ ((p[:, 0] - lo) * (hi - p[:, 0]))))
        # [S3] aggregate: current block from applied setpoints, future blocks from plans
        zp = self.plan_p.copy()
        zq = self.plan_q.copy()
        zp[:, 0] = self.applied_p
        zq[:, 0] = self.applied_q
        P, Q = pop.injections(zp, zq)
        P = P / self.model.base_kva + p0w
        Q = Q / self.model.base_kva + q0w
        yhat = P @ self.model.A.T + Q @ self.model.B.T + self.model.c
        # [S4] measurement for the current block
        if self.cfg.plant == "ac":
            v = solve_ac(self.feeder, (P[0], Q[0]))
            if self.model.quantity == "squared":
                v = v * v
        else:
            v = yhat[0].copy()
        if self.cfg.noise > 0:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1, self.t]))
            v = v + rng.uniform(-self.cfg.noise, self.cfg.noise, v.shape)
        # [S5] dual step: measured current block, predicted future blocks
        y_used = yhat.copy()
        y_used[0] = v
        self.trace.provenance.append("meas")
        g = constraint_value(self.spec, y_used)
        self.mu = np.maximum(0.0, self.mu + cfg.epsilon * (g - cfg.phi * self.mu))
        g_pred0 = constraint_value(self.spec, yhat[0])
        return n_guard, var_g, g[0], g_pred0, v, yhat

    # -- records ------------------------------------------------------------

    def _record(self, active, v, yhat, g0, n_guard, var_g):
        alpha, _ = signal_arrays(self.model, self.spec, self.mu)
        pop = self.pop
        self.trace.summary.append((
            float(self.t), float(v.max()), float(v.min()), float(yhat[0].max()), float(g0.max()),
            float(np.sqrt(np.sum(self.mu**2))), float(np.abs(alpha).max()), float(active.size),
            float(n_guard), var_g,
            float(self.applied_p[pop.pv_rows].sum()) if pop.pv.size else 0.0,
            float(self.applied_p[pop.chain_rows].sum()) if pop.chain.size else 0.0,
        ))
        if self.t % self.cfg.record_every == 0:
            snap = self.trace.snapshots
            snap["tick"].append(self.t)
            snap["v"].append(v.copy())
            snap["mu0"].append(self.mu[0].copy())
            snap["alpha0"].append(alpha[0].copy())
            snap["p_applied"].append(self.applied_p.copy())
            snap["states"].append(self.x.copy())

    def run(self, ticks: int):
        for _ in range(ticks):
            self.step()
        return self.trace

    # -- reference annotations ----------------------------------------------------

    def frozen_problem(self, t=None) -> WindowProblem:
        """Offline window problem matching the engine's inputs at tick ``t`` (default: now)."""
        t = self.t if t is None else t
        states = {self.devices[i].name: float(self.x[j]) for i, j in self._chain_pos.items()}
        return window_problem(self.model, self.spec, self.devices, self.timeline, t, self.S, self.m, states)

    def _annotate_reference(self, g_meas, g_pred, var_g):
        cfg = self.cfg
        prob = self.frozen_problem()
        mu_entering = self._mu_entering
        scfg = SolverConfig(
            epsilon=cfg.epsilon, phi=cfg.phi, stop_delta=cfg.reference_tol,
            max_iters=cfg.reference_max_iters, check_stepsize=False, inner_tol=cfg.inner_tol,
        )
        res = run_offline(prob, scfg, randomize=False, log_level="none", slater=False, mu0=self._ref_mu)
        self._ref_mu = res.dual.mu
        ref = self.trace.reference
        ref["tick"].append(self.t)
        ref["mu"].append(mu_entering)
        ref["mu_star"].append(res.dual.mu.copy())
        ref["grad"].append(prob.dual_gradient(mu_entering, cfg.phi))
        ref["grad_star"].append(prob.dual_gradient(res.dual.mu, cfg.phi))
        ref["g_meas"].append(g_meas.copy())
        ref["g_pred"].append(g_pred.copy())
        ref["var_g"].append(var_g)


def window_devices(devices, timeline: ScenarioTimeline, t: int, slots: int, ticks_per_slot: int, states=None):
    """Devices whose exogenous series are the timeline samples of the window starting at tick t.

    ``states`` optionally maps device names to current states. All devices are
    returned with period 1 (a frozen window problem has no asynchrony).
    """
    bt = t + ticks_per_slot * np.arange(slots)
    if bt[-1] >= timeline.ticks:
        raise HorizonMismatchError(f"window at tick {t} runs past the timeline end", "timeline")
    out = []
    pv_j = 0
    for d in devices:
        p = d.params
        x0 = d.x0 if states is None else states.get(d.name, d.x0)
        if isinstance(p, PvParams):
            out.append(replace(d, params=replace(p, p_avail=timeline.pv_avail[bt, pv_j]), period=1, phase=0))
            pv_j += 1
        elif isinstance(p, HvacParams):
            out.append(replace(d, params=replace(p, T_out=timeline.T_out[bt]), x0=x0, period=1, phase=0))
        else:
            out.append(replace(d, x0=x0, period=1, phase=0))
    return out


def window_problem(model, spec, devices, timeline: ScenarioTimeline, t: int, slots: int, ticks_per_slot: int = 1, states=None):
    """Frozen offline problem for the window starting at tick ``t``."""
    bt = t + ticks_per_slot * np.arange(slots)
    devs = window_devices(devices, timeline, t, slots, ticks_per_slot, states)
    return WindowProblem(model, spec, devs, timeline.p0[bt], timeline.q0[bt])


def _pv_subset(fleet, sel):
    if np.all(sel):
        return fleet
    return PvFleet(fleet.index[sel], fleet.node[sel], fleet.p_avail[sel], fleet.eta[sel], fleet.c_p[sel], fleet.c_q[sel])


"""Customer-side computation: relaxed window subproblems and randomized recovery.

Subproblems are separable across devices, so a node's problem is solved by
solving each of its devices' problems. Devices are stored as a structure of
arrays (one row per device, one column per window slot) and solved in batch.

Objective convention for a device at node i, given incentive signals
(alpha, beta) in $/kW and $/kvar: minimize cost - sum(alpha * p_inj + beta * q_inj)
where p_inj is the nodal injection. For A/Cs and batteries p_inj = -p_local.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .devices import Device
from .errors import (
    ConvergenceError,
    DimensionError,
    InfeasibleBandError,
    RandomizationError,
    WindowError,
)

CLAMP_TOL = 1e-7


@dataclass(frozen=True)
class IncentiveSignal:
    """Per-slot, per-node prices: arrays of shape (w + 1, N)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        b = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if a.shape != b.shape:
            raise DimensionError("alpha and beta shapes differ")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("incentive signals must be finite")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @classmethod
    def zeros(cls, slots, node_count):
        return cls(np.zeros((slots, node_count)), np.zeros((slots, node_count)))

    @property
    def slots(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class RandomizationPlan:
    p_low: float
    p_high: float
    prob_high: float

    @property
    def mean(self) -> float:
        return self.p_low + self.prob_high * (self.p_high - self.p_low)

    @property
    def variance(self) -> float:
        return self.prob_high * (1 - self.prob_high) * (self.p_high - self.p_low) ** 2


@dataclass
class TrajectoryDecision:
    """Window decisions in device-local units.

    ``relaxed_p``/``relaxed_q`` have shape (n_devices, w + 1). ``realized_p``
    equals ``relaxed_p`` except in the first column, which holds the drawn
    discrete setpoint for discrete devices. ``u`` records the uniform variate
    used per device (NaN for continuous devices or devices not redrawn).
    """

    relaxed_p: np.ndarray
    relaxed_q: np.ndarray
    realized_p: np.ndarray
    realized_q: np.ndarray
    u: np.ndarray

    @property
    def realized_now(self):
        return self.realized_p[:, 0], self.realized_q[:, 0]


def build_randomization_plan(relaxed_p: float, discrete_set: Sequence[float]) -> RandomizationPlan:
    """Two-point distribution on the nearest setpoints around ``relaxed_p``."""
    pts = np.unique(np.asarray(discrete_set, dtype=float))
    if pts.size == 0:
        raise RandomizationError("empty discrete set")
    lo, hi, prob = bracket(np.array([relaxed_p]), pts[None, :])
    return RandomizationPlan(float(lo[0]), float(hi[0]), float(prob[0]))


def bracket(p: np.ndarray, setpoints: np.ndarray, tol: float = CLAMP_TOL):
    """Vectorized bracket search.

    ``setpoints`` is (n, K), sorted per row (rows may repeat their last value
    as padding). Returns (p_low, p_high, prob_high), each of shape (n,).
    """
    p = np.asarray(p, dtype=float)
    smin, smax = setpoints[:, 0], setpoints[:, -1]
    if np.any(p < smin - tol) or np.any(p > smax + tol):
        bad = int(np.flatnonzero((p < smin - tol) | (p > smax + tol))[0])
        raise RandomizationError(
            f"relaxed value {p[bad]:.10g} lies outside the hull [{smin[bad]:.10g}, {smax[bad]:.10g}]"
        )
    p = np.clip(p, smin, smax)
    below = np.where(setpoints <= p[:, None], setpoints, -np.inf).max(axis=1)
    above = np.where(setpoints >= p[:, None], setpoints, np.inf).min(axis=1)
    span = above - below
    with np.errstate(invalid="ignore", divide="ignore"):
        prob = np.where(span > 0, (p - below) / np.where(span > 0, span, 1.0), 0.0)
    return below, above, prob


def realize(plan: RandomizationPlan, u: float) -> float:
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    return plan.p_high if u < plan.prob_high else plan.p_low


def realize_many(p_low, p_high, prob_high, u):
    return np.where(u < prob_high, p_high, p_low)


class DeviceStreams:
    """One counter-based random stream per device, keyed by (seed, device id).

    Draws are buffered in blocks per device, so the sequence each device sees
    does not depend on how often, or alongside which other devices, it draws.
    """

    def __init__(self, seed: int, n_devices: int, block: int = 256):
        self.seed = int(seed)
        self.block = block
        self._gens = [
            np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, d])))
            for d in range(n_devices)
        ]
        self._buf = np.empty((n_devices, block))
        self._ptr = np.full(n_devices, block)

    def draw(self, devices) -> np.ndarray:
        devices = np.asarray(devices, dtype=int)
        for d in devices[self._ptr[devices] >= self.block]:
            self._buf[d] = self._gens[d].random(self.block)
            self._ptr[d] = 0
        out = self._buf[devices, self._ptr[devices]]
        self._ptr[devices] += 1
        return out


@dataclass
class PvFleet:
    """PV devices: available power (n, S), ratings and cost weights (n,)."""

    index: np.ndarray
    node: np.ndarray
    p_avail: np.ndarray
    eta: np.ndarray
    c_p: np.ndarray
    c_q: np.ndarray

    @property
    def size(self) -> int:
        return self.index.size


def solve_pv(fleet: PvFleet, alpha: np.ndarray, beta: np.ndarray):
    """Exact minimizer of c_p (p_av - p)^2 + c_q q^2 - alpha p - beta q on box and disk.

    Eliminating the box and the disk through its multiplier lam gives
    p(lam) = clip(c_p p_u / (c_p + lam), 0, p_max), q(lam) = c_q q_u / (c_q + lam);
    lam is found by bisection on the disk boundary where needed.
    """
    cp, cq, eta = fleet.c_p[:, None], fleet.c_q[:, None], fleet.eta[:, None]
    pmax = np.minimum(fleet.p_avail, eta)
    pu = fleet.p_avail + alpha / (2 * cp)
    qu = beta / (2 * cq)

    def point(lam):
        return np.clip(cp * pu / (cp + lam), 0.0, pmax), cq * qu / (cq + lam)

    p, q = point(0.0)
    out = p * p + q * q > eta * eta
    if np.any(out):
        lo = np.zeros_like(p)
        hi = np.maximum(cp, cq) * np.hypot(pu, qu) / eta
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            pm, qm = point(mid)
            over = pm * pm + qm * qm > eta * eta
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
            if np.all(hi - lo <= 1e-15 * np.maximum(hi, 1.0)):
                break
        pm, qm = point(hi)
        p = np.where(out, pm, p)
        q = np.where(out, qm, q)
    return p, q


@dataclass
class ChainFleet:
    """A/Cs and batteries over an S-slot window.

    Per device: decay ``a``, gain ``k``, initial state ``x0``, nominal state,
    cost weight, hull [pmin, pmax] and sorted setpoints (n, K) padded by
    repeating the largest value. Per device and slot: drift ``b`` and state
    band ``lo``/``hi`` (n, S). ``lam`` holds warm-start inner multipliers.
    """

    index: np.ndarray
    node: np.ndarray
    a: np.ndarray
    k: np.ndarray
    x0: np.ndarray
    nom: np.ndarray
    weight: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    setpoints: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    names: List[str] = field(default_factory=list)
    lam: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.index.size

    @property
    def slots(self) -> int:
        return self.b.shape[1]

    def subset(self, rows) -> "ChainFleet":
        rows = np.asarray(rows, dtype=int)
        return ChainFleet(
            self.index[rows], self.node[rows], self.a[rows], self.k[rows], self.x0[rows],
            self.nom[rows], self.weight[rows], self.pmin[rows], self.pmax[rows],
            self.setpoints[rows], self.b[rows], self.lo[rows], self.hi[rows],
            [self.names[r] for r in rows] if self.names else [],
            None if self.lam is None else self.lam[rows],
        )

    def states(self, p: np.ndarray) -> np.ndarray:
        """States x[1..S] for powers p of shape (n, S)."""
        x = np.empty_like(p)
        prev = self.x0
        for m in range(p.shape[1]):
            prev = self.a * prev + self.b[:, m] + self.k * p[:, m]
            x[:, m] = prev
        return x


def check_reachability(fleet: ChainFleet, relax: bool = False):
    """Forward interval propagation of the reachable states.

    For scalar dynamics with interval inputs this is an exact feasibility test.
    With ``relax=True`` an unreachable band is widened to the nearest reachable
    point (and the widened bands are returned); otherwise the first violation
    raises :class:`InfeasibleBandError`.
    """
    lo, hi = fleet.lo.copy(), fleet.hi.copy()
    klo = np.minimum(fleet.k * fleet.pmin, fleet.k * fleet.pmax)
    khi = np.maximum(fleet.k * fleet.pmin, fleet.k * fleet.pmax)
    r_lo = r_hi = fleet.x0.copy()
    for m in range(fleet.slots):
        base_lo = np.minimum(fleet.a * r_lo, fleet.a * r_hi) + fleet.b[:, m]
        base_hi = np.maximum(fleet.a * r_lo, fleet.a * r_hi) + fleet.b[:, m]
        reach_lo, reach_hi = base_lo + klo, base_hi + khi
        too_hot = reach_lo > hi[:, m]
        too_cold = reach_hi < lo[:, m]
        bad = too_hot | too_cold
        if np.any(bad):
            if not relax:
                j = int(np.flatnonzero(bad)[0])
                name = fleet.names[j] if fleet.names else int(fleet.index[j])
                raise InfeasibleBandError(
                    name, m + 1, (lo[j, m], hi[j, m]), (reach_lo[j], reach_hi[j])
                )
            hi[:, m] = np.where(too_hot, reach_lo, hi[:, m])
            lo[:, m] = np.where(too_cold, reach_hi, lo[:, m])
        r_lo = np.maximum(reach_lo, lo[:, m])
        r_hi = np.minimum(reach_hi, hi[:, m])
    return lo, hi


def solve_chain(
    fleet: ChainFleet,
    lin: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    check: bool = True,
    relax: bool = False,
):
    """Minimize w ||x - nom||^2 + lin . p over the relaxed window set of each device.

    ``lin`` (n, S) is the linear price on device-local power. Works in state
    coordinates: with powers p = D x + d, the state box is handled exactly by
    clamping and the power hull is dualized. The inner dual is maximized by
    accelerated proximal ascent with adaptive restart. Returns (p, iterations).
    """
    n, S = fleet.size, fleet.slots
    if lin.shape != (n, S):
        raise DimensionError(f"price array has shape {lin.shape}, expected {(n, S)}")
    lo, hi = fleet.lo, fleet.hi
    if check or relax:
        lo, hi = check_reachability(fleet, relax=relax)
    if n == 0:
        return np.zeros((0, S)), 0
    a, k, c = fleet.a[:, None], fleet.k[:, None], fleet.weight[:, None]
    nom = fleet.nom[:, None]
    pmin, pmax = fleet.pmin[:, None], fleet.pmax[:, None]
    b = fleet.b

    if S == 1:
        base = fleet.a * fleet.x0 + b[:, 0]
        ends = np.stack([base + fleet.k * fleet.pmin, base + fleet.k * fleet.pmax])
        xlo = np.maximum(ends.min(axis=0), lo[:, 0])
        xhi = np.minimum(ends.max(axis=0), hi[:, 0])
        x = np.clip(fleet.nom - lin[:, 0] / (2 * fleet.weight * fleet.k), xlo, xhi)
        p = np.clip((x - base) / fleet.k, fleet.pmin, fleet.pmax)
        return p[:, None], 0

    step = 2 * c * k * k / (1 + np.abs(a)) ** 2
    lam = np.zeros((n, S)) if fleet.lam is None or fleet.lam.shape != (n, S) else fleet.lam.copy()
    y = lam.copy()
    theta = np.ones((n, 1))
    active = np.ones(n, dtype=bool)
    p_out = np.empty((n, S))
    resid = np.full(n, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        ya = y[idx]
        sl = (idx,)
        # x(y) = clip(nom - D^T y / (2c)) with (D^T y)_m = (y_m - a y_{m+1}) / k
        dty = ya.copy()
        aa, kk, cc = a[sl], k[sl], c[sl]
        dty[:, :-1] -= aa * ya[:, 1:]
        x = np.clip(nom[sl] - dty / (kk * 2 * cc), lo[sl], hi[sl])
        xprev = np.concatenate([fleet.x0[idx, None], x[:, :-1]], axis=1)
        r = (x - aa * xprev - b[sl]) / kk
        t = step[sl]
        v = ya + t * r
        pb = np.clip((v - lin[sl]) / t, pmin[sl], pmax[sl])
        lam_new = v - t * pb
        gm = r - pb
        res = np.abs(gm).max(axis=1)
        done = res <= tol
        if np.any(done):
            di = idx[done]
            p_out[di] = np.clip(r[done], pmin[di], pmax[di])
            resid[di] = res[done]
            lam[di] = lam_new[done]
            active[di] = False
        keep = ~done
        if not np.any(keep):
            break
        ki = idx[keep]
        ln, lp, th = lam_new[keep], lam[ki], theta[ki]
        restart = np.sum(gm[keep] * (ln - lp), axis=1, keepdims=True) < 0
        th_new = 0.5 * (1 + np.sqrt(1 + 4 * th * th))
        mom = np.where(restart, 0.0, (th - 1) / th_new)
        y[ki] = ln + mom * (ln - lp)
        theta[ki] = np.where(restart, 1.0, th_new)
        lam[ki] = ln
        resid[ki] = res[keep]
    fleet.lam = lam
    if np.any(active):
        raise ConvergenceError("chain subproblem", max_iter, float(resid[active].max()))
    return p_out, it



class Population:
    """All devices of a feeder over an S-slot window, split into PV and chain fleets.

    Device-local powers are returned as (n_devices, S) arrays in roster order.
    ``sign`` maps them to nodal injections (+1 for PV, -1 for A/Cs and batteries).
    """

    def __init__(self, devices: Sequence[Device], node_count: int, slots: int, start: int = 0):
        from .grid import Aggregator

        self.devices = list(devices)
        self.node_count = node_count
        self.slots = slots
        n = len(self.devices)
        self.names = [d.name for d in self.devices]
        self.nodes = np.array([d.node for d in self.devices], dtype=int)
        self.aggregator = Aggregator(self.nodes, node_count)
        kinds = [d.kind for d in self.devices]
        self.pv_rows = np.array([i for i in range(n) if kinds[i] == "pv"], dtype=int)
        self.chain_rows = np.array([i for i in range(n) if kinds[i] != "pv"], dtype=int)
        self.sign = np.where(np.array(kinds) == "pv", 1.0, -1.0) if n else np.zeros(0)
        self.discrete = np.array([k != "pv" for k in kinds], dtype=bool)

        pvs = [self.devices[i].params for i in self.pv_rows]
        self.pv = PvFleet(
            self.pv_rows, self.nodes[self.pv_rows], np.zeros((len(pvs), slots)),
            np.array([p.eta for p in pvs]), np.array([p.c_p for p in pvs]),
            np.array([p.c_q for p in pvs]),
        )
        chs = [self.devices[i].params for i in self.chain_rows]
        width = max([len(p.setpoints) for p in chs], default=1)
        sp = np.array([np.pad(p.setpoints, (0, width - len(p.setpoints)), mode="edge") for p in chs])
        self.chain = ChainFleet(
            self.chain_rows, self.nodes[self.chain_rows],
            np.array([p.decay for p in chs]), np.array([p.gain for p in chs]),
            np.array([self.devices[i].x0 for i in self.chain_rows], dtype=float),
            np.array([p.nominal for p in chs]), np.array([p.weight for p in chs]),
            sp[:, 0] if chs else np.zeros(0), sp[:, -1] if chs else np.zeros(0),
            sp.reshape(len(chs), width),
            np.zeros((len(chs), slots)),
            np.tile(np.array([p.band[0] for p in chs])[:, None], (1, slots)),
            np.tile(np.array([p.band[1] for p in chs])[:, None], (1, slots)),
            [self.names[i] for i in self.chain_rows],
        )
        self.set_window(start)

    @property
    def size(self) -> int:
        return len(self.devices)

    def set_window(self, start: int):
        """Load exogenous series for window slots start..start+S-1 from device parameters."""
        for j, i in enumerate(self.pv_rows):
            series = self.devices[i].params.p_avail
            if start + self.slots > series.shape[0]:
                raise WindowError(f"device {self.names[i]}: p_avail ends before slot {start + self.slots - 1}")
            self.pv.p_avail[j] = series[start : start + self.slots]
        for j, i in enumerate(self.chain_rows):
            self.chain.b[j] = self.devices[i].params.drift(start, self.slots)

    def device_prices(self, signal: IncentiveSignal):
        if signal.alpha.shape != (self.slots, self.node_count):
            raise DimensionError(
                f"signal shape {signal.alpha.shape}, expected {(self.slots, self.node_count)}"
            )
        return signal.alpha[:, self.nodes - 1].T, signal.beta[:, self.nodes - 1].T

    def solve(self, signal: IncentiveSignal, tol=1e-8, max_iter=10_000, relax=False):
        """Relaxed per-device optimum (device-local p, q), each (n, S)."""
        alpha, beta = self.device_prices(signal)
        p = np.zeros((self.size, self.slots))
        q = np.zeros_like(p)
        if self.pv.size:
            p[self.pv_rows], q[self.pv_rows] = solve_pv(self.pv, alpha[self.pv_rows], beta[self.pv_rows])
        if self.chain.size:
            p[self.chain_rows], _ = solve_chain(
                self.chain, alpha[self.chain_rows], tol=tol, max_iter=max_iter, relax=relax
            )
        return p, q

    def injections(self, p, q):
        """Nodal injections (S, N) in kW/kvar for device-local powers (n, S)."""
        return self.aggregator((self.sign[:, None] * p).T), self.aggregator((self.sign[:, None] * q).T)

    def randomize(self, relaxed_p, relaxed_q, streams: DeviceStreams) -> TrajectoryDecision:
        """Draw first-slot setpoints for every discrete device."""
        realized = relaxed_p.copy()
        u = np.full(self.size, np.nan)
        rows = self.chain_rows
        if rows.size:
            lo, hi, prob = bracket(relaxed_p[rows, 0], self.chain.setpoints)
            draws = streams.draw(rows)
            realized[rows, 0] = realize_many(lo, hi, prob, draws)
            u[rows] = draws
        return TrajectoryDecision(relaxed_p, relaxed_q, realized, relaxed_q.copy(), u)


def solve_subproblem(
    devices: Sequence[Device],
    node: int,
    signal: IncentiveSignal,
    start: int = 0,
    states: Optional[dict] = None,
    tol: float = 1e-8,
) -> TrajectoryDecision:
    """Relaxed window optimum for the devices at ``node``.

    ``states`` optionally maps device names to current state values,
    overriding the roster's initial states.
    """
    local = [d for d in devices if d.node == node]
    if states:
        from dataclasses import replace

        local = [replace(d, x0=states.get(d.name, d.x0)) for d in local]
    pop = Population(local, signal.alpha.shape[1], signal.slots, start)
    p, q = pop.solve(signal, tol=tol)
    return TrajectoryDecision(p, q, p.copy(), q.copy(), np.full(len(local), np.nan))

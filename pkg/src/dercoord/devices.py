"""Device classes: PV inverters, thermostatically controlled A/Cs and batteries.

Every device carries a device-local active power. For the A/C and the battery
the local power is consumption (positive when running or charging); the nodal
injection seen by the network is its negation. For PV the local power already
is the injection. Discrete devices have zero reactive power.

A/Cs and batteries share the same scalar affine dynamics

    x[m + 1] = a * x[m] + b[m] + k * p[m]

and are called "chain" devices throughout the package. For an A/C
``a = 1 - zeta1``, ``k = zeta2`` and ``b[m] = zeta_out * T_out[m]``; for a
battery ``a = 1``, ``k = slot_hours / capacity`` and ``b = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DimensionError, WindowError


def _frozen_array(x, name, ndim=1):
    arr = np.array(x, dtype=float)
    if arr.ndim == 0 and ndim == 1:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PvParams:
    """PV inverter: available power per slot (kW), rating (kVA), curtailment costs."""

    p_avail: np.ndarray
    eta: float
    c_p: float = 1.0
    c_q: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p_avail", _frozen_array(self.p_avail, "p_avail"))
        if np.any(self.p_avail < 0):
            raise ValueError("p_avail must be nonnegative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.c_p <= 0 or self.c_q <= 0:
            raise ValueError("PV cost weights must be positive")


@dataclass(frozen=True)
class HvacParams:
    """A/C thermal model on a fixed slot grid.

    ``zeta2`` is the temperature change per kW of consumption per slot and is
    negative, so running the unit cools the room. ``zeta_out`` couples the
    ambient temperature; when omitted it is ``-zeta2`` (the ambient term enters
    with the same magnitude as power and the opposite sign).
    """

    zeta1: float
    zeta2: float
    p_on: float
    T_out: np.ndarray
    T_min: float = 70.0
    T_max: float = 80.0
    T_nom: float = 75.0
    c_t: float = 1.0
    zeta_out: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "T_out", _frozen_array(self.T_out, "T_out"))
        if not 0 < self.zeta1 < 1:
            raise ValueError("zeta1 must lie in (0, 1)")
        if self.zeta2 >= 0:
            raise ValueError("zeta2 must be negative (running the A/C cools)")
        if self.p_on <= 0:
            raise ValueError("p_on is a consumption and must be positive")
        if not self.T_min < self.T_nom < self.T_max:
            raise ValueError("need T_min < T_nom < T_max")
        if self.c_t <= 0:
            raise ValueError("c_t must be positive")
        if self.zeta_out is None:
            object.__setattr__(self, "zeta_out", -self.zeta2)

    @property
    def decay(self) -> float:
        return 1.0 - self.zeta1

    @property
    def gain(self) -> float:
        return self.zeta2

    @property
    def setpoints(self) -> np.ndarray:
        return np.array([0.0, self.p_on])

    @property
    def band(self):
        return self.T_min, self.T_max

    @property
    def nominal(self) -> float:
        return self.T_nom

    @property
    def weight(self) -> float:
        return self.c_t

    def drift(self, start: int, length: int) -> np.ndarray:
        _check_series(self.T_out, start, length, "T_out")
        return self.zeta_out * self.T_out[start : start + length]


@dataclass(frozen=True)
class BatteryParams:
    """Battery with a finite set of charge rates (kW, negative = discharge)."""

    capacity: float
    rates: np.ndarray
    soc_min: float = 0.2
    soc_max: float = 0.8
    soc_nom: float = 0.5
    c_b: float = 1.0
    slot_hours: float = 0.25

    def __post_init__(self):
        rates = np.unique(_frozen_array(self.rates, "rates"))
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        if self.capacity <= 0 or self.slot_hours <= 0:
            raise ValueError("capacity and slot_hours must be positive")
        if not 0 <= self.soc_min < self.soc_nom < self.soc_max <= 1:
            raise ValueError("need 0 <= soc_min < soc_nom < soc_max <= 1")
        if not np.any(rates == 0):
            raise ValueError("the rate set must contain 0")
        if self.c_b <= 0:
            raise ValueError("c_b must be positive")

    @property
    def decay(self) -> float:
        return 1.0

    @property
    def gain(self) -> float:
        return self.slot_hours / self.capacity

    @property
    def setpoints(self) -> np.ndarray:
        return self.rates

    @property
    def band(self):
        return self.soc_min, self.soc_max

    @property
    def nominal(self) -> float:
        return self.soc_nom

    @property
    def weight(self) -> float:
        return self.c_b

    def drift(self, start: int, length: int) -> np.ndarray:
        return np.zeros(length)


ChainParams = Union[HvacParams, BatteryParams]
DeviceParams = Union[PvParams, HvacParams, BatteryParams]


@dataclass(frozen=True)
class DeviceState:
    value: Optional[float]
    slot: int = 0

    def __post_init__(self):
        if self.value is not None and not np.isfinite(self.value):
            raise ValueError("device state must be finite")


@dataclass(frozen=True)
class HullInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("hull needs lo <= hi")

    def contains(self, p, tol=1e-9) -> bool:
        return self.lo - tol <= p <= self.hi + tol


@dataclass(frozen=True)
class PvHull:
    """PV convex set: the box 0 <= p <= p_avail intersected with the disk of radius eta."""

    p_max: float
    eta: float
    continuous: bool = True

    def contains(self, p, q, tol=1e-9) -> bool:
        return -tol <= p <= self.p_max + tol and p * p + q * q <= self.eta**2 + tol


@dataclass(frozen=True)
class Device:
    """A device on the feeder with its update schedule (period and phase in ticks)."""

    name: str
    node: int
    params: DeviceParams
    x0: Optional[float] = None
    period: int = 1
    phase: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"device {self.name}: period must be >= 1")
        if not 0 <= self.phase < self.period:
            raise ValueError(f"device {self.name}: phase must lie in [0, period)")
        if self.kind != "pv" and (self.x0 is None or not np.isfinite(self.x0)):
            raise ValueError(f"device {self.name}: chain devices need a finite initial state")

    @property
    def kind(self) -> str:
        if isinstance(self.params, PvParams):
            return "pv"
        if isinstance(self.params, HvacParams):
            return "hvac"
        return "battery"

    @property
    def discrete(self) -> bool:
        return self.kind != "pv"


def _check_series(series, start, length, name):
    if start < 0 or start + length > series.shape[0]:
        raise WindowError(
            f"{name} covers slots 0..{series.shape[0] - 1}, window needs {start}..{start + length - 1}"
        )


def pv_feasible_project(params: PvParams, slot: int, pq) -> tuple:
    """Clamp p to [0, min(p_avail, eta)], then shrink q onto the rating disk.

    This composed map returns a feasible point and leaves feasible points
    unchanged. It coincides with the Euclidean projection onto the PV set only
    when the clamped point is already inside the disk or q is zero; the
    subproblem solver uses its own exact KKT solution instead.
    """
    _check_series(params.p_avail, slot, 1, "p_avail")
    p, q = float(pq[0]), float(pq[1])
    p = min(max(p, 0.0), min(params.p_avail[slot], params.eta))
    qmax = np.sqrt(max(params.eta**2 - p * p, 0.0))
    if p * p + q * q > params.eta**2:
        q = float(np.copysign(qmax, q))
    return p, q


def chain_propagate(params: ChainParams, x0: float, powers, m: int, start: int = 0) -> float:
    """Closed-form state after ``m`` slots starting at slot ``start``."""
    powers = np.asarray(powers, dtype=float)
    if m < 1:
        raise WindowError("m must be at least 1")
    if powers.shape[0] < m:
        raise WindowError(f"need {m} power values, got {powers.shape[0]}")
    a, k = params.decay, params.gain
    b = params.drift(start, m)
    weights = a ** np.arange(m - 1, -1, -1, dtype=float)
    return float(a**m * x0 + weights @ (b + k * powers[:m]))


def chain_trajectory(params: ChainParams, x0: float, powers, start: int = 0) -> np.ndarray:
    """States x[1..n] reached by the recursion for ``n = len(powers)`` slots."""
    powers = np.asarray(powers, dtype=float)
    n = powers.shape[0]
    a, k = params.decay, params.gain
    b = params.drift(start, n)
    out = np.empty(n)
    x = float(x0)
    for m in range(n):
        x = a * x + b[m] + k * powers[m]
        out[m] = x
    return out


def hvac_propagate(params: HvacParams, x_t: float, powers, m: int, start: int = 0) -> float:
    if start + m > params.T_out.shape[0]:
        raise WindowError(f"m={m} from slot {start} exceeds the ambient series")
    return chain_propagate(params, x_t, powers, m, start)


def battery_propagate(params: BatteryParams, soc_t: float, powers, m: int) -> float:
    return chain_propagate(params, soc_t, powers, m)


def hull(params: DeviceParams, slot: int = 0):
    if isinstance(params, PvParams):
        _check_series(params.p_avail, slot, 1, "p_avail")
        return PvHull(float(min(params.p_avail[slot], params.eta)), params.eta)
    sp = params.setpoints
    return HullInterval(float(sp.min()), float(sp.max()))


def state_constraint_residual(params: ChainParams, x_traj) -> np.ndarray:
    """Stacked (x - upper, lower - x) per slot; nonpositive iff inside the band."""
    x = np.asarray(x_traj, dtype=float)
    lo, hi = params.band
    return np.concatenate([x - hi, lo - x])


def device_cost(params: DeviceParams, decision, x0: Optional[float] = None, start: int = 0):
    """Cost of a window decision and its gradient with respect to the powers.

    PV decisions have shape (n, 2) holding (p, q) per slot; chain decisions are
    length-n power vectors. Chain costs penalize the deviation of the states
    x[1..n] from the nominal value.
    """
    z = np.asarray(decision, dtype=float)
    if isinstance(params, PvParams):
        if z.ndim != 2 or z.shape[1] != 2:
            raise DimensionError("PV decision must have shape (n, 2)")
        n = z.shape[0]
        _check_series(params.p_avail, start, n, "p_avail")
        short = params.p_avail[start : start + n] - z[:, 0]
        cost = float(np.sum(params.c_p * short**2 + params.c_q * z[:, 1] ** 2))
        grad = np.column_stack([-2 * params.c_p * short, 2 * params.c_q * z[:, 1]])
        return cost, grad
    if z.ndim != 1:
        raise DimensionError("chain decision must be a vector of powers")
    G = propagation_matrix(params.decay, params.gain, z.shape[0])
    dev = chain_trajectory(params, x0, z, start) - params.nominal
    return float(params.weight * dev @ dev), 2 * params.weight * (G.T @ dev)


def propagation_matrix(a: float, k: float, n: int) -> np.ndarray:
    """Lower-triangular map from powers p[0..n-1] to states x[1..n]."""
    i = np.arange(n)
    expo = i[:, None] - i[None, :]
    G = np.where(expo >= 0, k * np.power(a, np.maximum(expo, 0).astype(float)), 0.0)
    return G


def chain_modulus(params: ChainParams, n: int) -> float:
    """Strong convexity modulus of the chain cost over an n-slot window."""
    G = propagation_matrix(params.decay, params.gain, n)
    return float(2 * params.weight * np.linalg.eigvalsh(G.T @ G)[0])

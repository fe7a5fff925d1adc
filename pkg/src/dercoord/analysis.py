"""Constants and bounds for the stochastic dual method, from closed forms or run logs.

Notation used throughout: sigma_c is the strong-convexity modulus of the
device costs, sigma_g the Frobenius norm of the constraint Jacobian with
respect to all decision variables, sigma_h the strong concavity of the
regularized dual, L = sigma_g^2 / sigma_c + phi the Lipschitz constant of the
dual gradient, Delta a bound on the variance of g caused by randomization,
rho the linearization residual and e the drift of the optimal multipliers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .devices import Device, PvParams, chain_modulus
from .errors import DercoordError, InfeasibleTighteningError, StepsizeError
from .grid import ConstraintSpec, LinearGridModel, constraint_jacobian


@dataclass(frozen=True)
class AnalysisConstants:
    sigma_c: float
    sigma_g: float
    sigma_h: float
    phi: float = 0.0
    Delta: float = 0.0
    rho: float = 0.0
    e: float = 0.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not val >= 0:
                raise ValueError(f"{name} must be nonnegative, got {val}")

    @property
    def L(self) -> float:
        if self.sigma_c <= 0:
            raise ValueError("sigma_c must be positive")
        return self.sigma_g**2 / self.sigma_c + self.phi

    def lemma2_holds(self, rtol=1e-9) -> bool:
        return self.sigma_h <= self.L * (1 + rtol)


def device_modulus(device: Device, slots: int) -> float:
    p = device.params
    if isinstance(p, PvParams):
        return 2 * min(p.c_p, p.c_q)
    return chain_modulus(p, slots)


def compute_sigma_c(devices: Sequence[Device], slots: int = 1) -> float:
    """Minimum over devices of the cost strong-convexity modulus over the window."""
    if not devices:
        raise ValueError("no devices")
    vals = [device_modulus(d, slots) for d in devices]
    sc = min(vals)
    if not sc > 0:
        raise DercoordError("a device cost is not strongly convex (zero weight)")
    return float(sc)


def sigma_c_population(pop, slots: int) -> float:
    return compute_sigma_c(pop.devices, slots)


def sigma_g(spec: ConstraintSpec, model: LinearGridModel) -> float:
    """Frobenius norm of the stacked nodal Jacobian (dg/dp, dg/dq) in p.u."""
    jp, jq = constraint_jacobian(spec, model)
    return float(math.sqrt(np.sum(jp**2) + np.sum(jq**2)))


def device_jacobian(spec: ConstraintSpec, model: LinearGridModel, devices: Sequence[Device]):
    """Columns of dg/dp and dg/dq per device in kW units (M x n each).

    Discrete devices have no reactive column (their q is fixed at zero).
    """
    jp, jq = constraint_jacobian(spec, model)
    cols_p, cols_q = [], []
    for d in devices:
        sign = 1.0 if d.kind == "pv" else -1.0
        cols_p.append(sign * jp[:, d.node - 1] / model.base_kva)
        cols_q.append(jq[:, d.node - 1] / model.base_kva if d.kind == "pv" else np.zeros(jp.shape[0]))
    return np.array(cols_p).T, np.array(cols_q).T


def sigma_g_devices(spec, model, devices, slots: int = 1) -> float:
    """Frobenius norm of the window Jacobian with respect to every device variable."""
    rp, rq = device_jacobian(spec, model, devices)
    return float(math.sqrt(slots * (np.sum(rp**2) + np.sum(rq**2))))


def sigma_g_population(spec, model, pop, slots: int) -> float:
    return sigma_g_devices(spec, model, pop.devices, slots)


@dataclass(frozen=True)
class DeltaBound:
    bound: float
    tight: float


def compute_delta(spec: ConstraintSpec, model: LinearGridModel, devices: Sequence[Device]) -> DeltaBound:
    """Randomization variance bounds for the current-slot constraint vector.

    ``bound`` = M |D_S| ||R||_F^2 max span^2 / 4, ``tight`` = ||R||_F^2 sum span^2 / 4,
    with R the Jacobian columns of the discrete devices and span the width of
    each device's setpoint range.
    """
    disc = [d for d in devices if d.discrete]
    if not disc:
        return DeltaBound(0.0, 0.0)
    rp, _ = device_jacobian(spec, model, disc)
    spans = np.array([d.params.setpoints.max() - d.params.setpoints.min() for d in disc])
    fro2 = float(np.sum(rp**2))
    M = rp.shape[0]
    return DeltaBound(M * len(disc) * fro2 * float(spans.max() ** 2) / 4, fro2 * float(np.sum(spans**2)) / 4)


def delta_from_jacobian(R: np.ndarray, spans) -> DeltaBound:
    """Same bounds as :func:`compute_delta` for an explicit M x |D_S| Jacobian."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    spans = np.asarray(spans, dtype=float).reshape(-1)
    if spans.size == 0:
        return DeltaBound(0.0, 0.0)
    fro2 = float(np.sum(R**2))
    return DeltaBound(R.shape[0] * spans.size * fro2 * float(spans.max() ** 2) / 4, fro2 * float(np.sum(spans**2)) / 4)


def randomization_variance(R: np.ndarray, p_star, p_low, p_high) -> float:
    """Exact total variance of g = R z + g0 under independent two-point draws."""
    var_d = (np.asarray(p_star) - p_low) * (p_high - np.asarray(p_star))
    return float(np.sum(np.asarray(R) ** 2 @ var_d))


def stepsize_limit(c: AnalysisConstants) -> float:
    """Largest admissible dual stepsize 2 sigma_h / L^2."""
    if c.sigma_c <= 0:
        raise ValueError("sigma_c must be positive")
    return 2 * c.sigma_h / c.L**2


def _check_eps(c, epsilon):
    lim = stepsize_limit(c)
    if not 0 < epsilon < lim:
        raise StepsizeError(epsilon, lim)


def offline_asymptote(c: AnalysisConstants, epsilon: float) -> float:
    """Limit bound on E|mu(k) - mu*|^2: epsilon Delta / (2 sigma_h - epsilon L^2)."""
    _check_eps(c, epsilon)
    return epsilon * c.Delta / (2 * c.sigma_h - epsilon * c.L**2)


def online_asymptote(c: AnalysisConstants, epsilon: float) -> float:
    """Tracking bound (eps^2 Delta + eps^2 rho + e) / (2 eps sigma_h - eps^2 L^2)."""
    _check_eps(c, epsilon)
    eps2 = epsilon * epsilon
    return (eps2 * c.Delta + eps2 * c.rho + c.e) / (2 * epsilon * c.sigma_h - eps2 * c.L**2)


def robust_bounds(spec: ConstraintSpec, var_v, cap: float) -> ConstraintSpec:
    """Tighten both voltage limits by delta = sqrt(max Var(v) / (2 cap)).

    With the mean voltage inside the tightened band, each side's violation
    probability of the original band is at most Var / (2 delta^2) <= cap when
    the voltage deviation is symmetric about its mean. Without symmetry the
    one-sided Cantelli inequality still caps each side at
    Var / (Var + delta^2) < 2 cap.
    """
    if not 0 < cap < 0.5:
        raise ValueError("cap must lie in (0, 0.5)")
    var = np.asarray(var_v, dtype=float)
    if np.any(var < 0):
        raise ValueError("variances must be nonnegative")
    delta = math.sqrt(float(np.max(var)) / (2 * cap))
    if delta == 0:
        return ConstraintSpec(spec.v_upper, spec.v_lower, rows=spec.rows)
    up, lo = spec.v_upper - delta, spec.v_lower + delta
    if np.any(lo >= up):
        i = int(np.argmax(lo - up))
        raise InfeasibleTighteningError(delta, lo[i], up[i])
    return ConstraintSpec(spec.v_upper, spec.v_lower, up, lo, rows=spec.rows)


def secant_sigma_h(mus, grads, mus_ref, grads_ref) -> float:
    """min over pairs of -<grad - grad_ref, mu - mu_ref> / |mu - mu_ref|^2 (NaN if no valid pair)."""
    best = np.inf
    for m, g, mr, gr in zip(mus, grads, mus_ref, grads_ref):
        dm = np.asarray(m) - np.asarray(mr)
        nrm = float(np.sum(dm * dm))
        if nrm > 1e-24:
            best = min(best, -float(np.sum((np.asarray(g) - np.asarray(gr)) * dm)) / nrm)
    return float(best) if np.isfinite(best) else float("nan")


def lipschitz_ratio(mus, grads, mus_ref, grads_ref) -> float:
    """max over pairs of |grad - grad_ref| / |mu - mu_ref|."""
    worst = 0.0
    for m, g, mr, gr in zip(mus, grads, mus_ref, grads_ref):
        dm = math.sqrt(float(np.sum((np.asarray(m) - np.asarray(mr)) ** 2)))
        if dm > 1e-12:
            worst = max(worst, math.sqrt(float(np.sum((np.asarray(g) - np.asarray(gr)) ** 2))) / dm)
    return worst


@dataclass(frozen=True)
class TraceConstants:
    e: float
    rho: float
    sigma_h: float
    Delta: float
    slots: int


def estimate_trace_constants(trace, start: int = 0, shift_slots: Optional[int] = None) -> TraceConstants:
    """Measure e, rho, sigma_h and Delta from a reference-annotated trace.

    ``trace`` is a mapping (or object with attributes) holding per-slot arrays:
    ``mu_star`` optimal multipliers, ``mu`` the algorithm's multipliers,
    ``grad`` and ``grad_star`` the dual gradients at those points,
    ``g_meas`` and ``g_pred`` the measured and predicted current-slot
    constraint values, and ``var_g`` the exact randomization variance of g.
    Only slots from ``start`` on are used.

    When the engine shifts its multipliers by one slot per tick, pass the
    window length as ``shift_slots``: e is then measured between each optimum
    and the shifted previous optimum (trailing block copied), which is the
    drift the shifted iteration actually has to track.
    """
    get = (lambda k: trace[k]) if isinstance(trace, dict) else (lambda k: getattr(trace, k))
    mu_star = np.asarray(get("mu_star"))[start:]
    if mu_star.shape[0] < 2:
        raise DercoordError("trace too short to estimate constants (need at least 2 slots)")
    mu = np.asarray(get("mu"))[start:]
    if shift_slots is None:
        diffs = np.diff(mu_star.reshape(mu_star.shape[0], -1), axis=0)
    else:
        blocks = mu_star.reshape(mu_star.shape[0], shift_slots, -1)
        prev = np.concatenate([blocks[:-1, 1:], blocks[:-1, -1:]], axis=1)
        diffs = (blocks[1:] - prev).reshape(blocks.shape[0] - 1, -1)
    e = float(np.max(np.sum(diffs**2, axis=1)))
    g_meas = np.asarray(get("g_meas"))[start:]
    g_pred = np.asarray(get("g_pred"))[start:]
    rho = float(np.max(np.sum((g_meas - g_pred) ** 2, axis=-1)))
    sh = secant_sigma_h(mu, np.asarray(get("grad"))[start:], mu_star, np.asarray(get("grad_star"))[start:])
    var_g = np.asarray(get("var_g"))[start:]
    return TraceConstants(e, rho, sh, float(var_g.max()) if var_g.size else 0.0, mu_star.shape[0])


@dataclass
class BoundReport:
    stepsize_limit: float
    epsilon: float
    offline_asymptote: Optional[float] = None
    online_asymptote: Optional[float] = None
    chebyshev_caps: Optional[float] = None
    measured_offline: Optional[float] = None
    measured_online: Optional[float] = None
    measured_violation: Optional[float] = None
    constants: Optional[dict] = None
    slack: float = 0.2
    passes: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("offline", "online"):
            bound = getattr(self, f"{name}_asymptote")
            meas = getattr(self, f"measured_{name}")
            if bound is not None and meas is not None:
                self.passes[name] = bool(meas <= bound * (1 + self.slack))
        if self.chebyshev_caps is not None and self.measured_violation is not None:
            self.passes["chebyshev"] = bool(self.measured_violation <= self.chebyshev_caps * (1 + self.slack))
        self.passes["stepsize"] = bool(self.epsilon < self.stepsize_limit)

    @property
    def ok(self) -> bool:
        return all(self.passes.values())

    def to_dict(self) -> dict:
        return asdict(self)

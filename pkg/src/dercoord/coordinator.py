"""Network-operator side: dual ascent, incentive signals and the offline loop.

Multipliers are stored per window slot as an array of shape (w + 1, M) where
M is the number of enforced constraint rows (see ``ConstraintSpec.rows``).
Batched runs over independent replicas carry a leading replica axis.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from .agent import DeviceStreams, IncentiveSignal, Population, check_reachability
from .devices import Device, propagation_matrix
from .errors import DimensionError, SlaterError, StepsizeError
from .grid import ConstraintSpec, LinearGridModel, constraint_jacobian, constraint_value

log = logging.getLogger(__name__)


@dataclass
class DualState:
    mu: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if np.any(self.mu < 0):
            raise ValueError("multipliers must be nonnegative")

    @classmethod
    def zeros(cls, slots, rows):
        return cls(np.zeros((slots, rows)))


@dataclass(frozen=True)
class SolverConfig:
    """Dual stepsize, regularization and stopping settings.

    ``strict`` turns a failed stepsize check into an error. ``sigma_h`` overrides
    the secant-based estimate of the dual strong concavity used by that check.
    """

    epsilon: float
    phi: float = 0.0
    stop_delta: float = 1e-6
    max_iters: int = 10_000
    strict: bool = False
    check_stepsize: bool = True
    sigma_h: Optional[float] = None
    inner_tol: float = 1e-8
    inner_max_iter: int = 10_000

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")
        if self.stop_delta < 0 or self.max_iters < 1:
            raise ValueError("invalid stopping settings")


def dual_update(state: DualState, g_value, cfg: SolverConfig) -> DualState:
    """Projected step mu <- max(0, mu + epsilon (g - phi mu))."""
    g = np.asarray(g_value, dtype=float)
    if g.shape != state.mu.shape:
        raise DimensionError(f"g has shape {g.shape}, multipliers have {state.mu.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("constraint values must be finite")
    mu = np.maximum(0.0, state.mu + cfg.epsilon * (g - cfg.phi * state.mu))
    return DualState(mu, state.k + 1)


def signal_arrays(model: LinearGridModel, spec: ConstraintSpec, mu: np.ndarray):
    """alpha = -dg/dp^T mu and beta = -dg/dq^T mu per slot, in $/kW."""
    jp, jq = constraint_jacobian(spec, model)
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1] != jp.shape[0]:
        raise DimensionError(f"multiplier rows {mu.shape[-1]} != constraint rows {jp.shape[0]}")
    return -(mu @ jp) / model.base_kva, -(mu @ jq) / model.base_kva


def incentive_signals(model: LinearGridModel, spec: ConstraintSpec, mu) -> IncentiveSignal:
    mu = mu.mu if isinstance(mu, DualState) else mu
    alpha, beta = signal_arrays(model, spec, np.atleast_2d(mu))
    return IncentiveSignal(alpha, beta)


class WindowProblem:
    """One look-ahead window: network model, limits, devices and baseline injections.

    ``p0``/``q0`` are the uncontrollable nodal injections (p.u.) per window slot,
    shape (S, N). ``replicas`` > 1 stacks independent copies of the device
    population so that many randomized runs can be advanced in one batch.
    """

    def __init__(
        self,
        model: LinearGridModel,
        spec: ConstraintSpec,
        devices: Sequence[Device],
        p0,
        q0=None,
        start: int = 0,
        replicas: int = 1,
    ):
        self.model = model
        self.spec = spec
        self.devices = list(devices)
        self.p0 = np.atleast_2d(np.asarray(p0, dtype=float))
        self.q0 = np.zeros_like(self.p0) if q0 is None else np.atleast_2d(np.asarray(q0, dtype=float))
        self.slots, n = self.p0.shape
        if n != model.node_count or spec.node_count != n or self.q0.shape != self.p0.shape:
            raise DimensionError("baseline, model and constraint sizes disagree")
        self.start = start
        self.replicas = replicas
        N = n
        if replicas == 1:
            roster = self.devices
        else:
            roster = [
                replace(d, node=d.node + c * N, name=f"{d.name}#{c}")
                for c in range(replicas)
                for d in self.devices
            ]
        self.population = Population(roster, N * replicas, self.slots, start)
        self.jp, self.jq = constraint_jacobian(spec, model)

    @property
    def node_count(self) -> int:
        return self.model.node_count

    @property
    def rows(self) -> int:
        return self.spec.row_count

    def _per_replica(self, flat):
        # (S, C*N) -> (C, S, N)
        S = flat.shape[0]
        return flat.reshape(S, self.replicas, self.node_count).transpose(1, 0, 2)

    def predict(self, p, q):
        """Linearized voltages (C, S, N) for device-local powers (n_total, S)."""
        P, Q = self.population.injections(p, q)
        P = self._per_replica(P) / self.model.base_kva + self.p0
        Q = self._per_replica(Q) / self.model.base_kva + self.q0
        return P @ self.model.A.T + Q @ self.model.B.T + self.model.c

    def g(self, p, q):
        return constraint_value(self.spec, self.predict(p, q))

    def signal(self, mu):
        """Flattened signal for the (possibly replicated) population; mu is (C, S, M)."""
        alpha, beta = signal_arrays(self.model, self.spec, mu)
        S = self.slots
        flat = lambda x: x.transpose(1, 0, 2).reshape(S, self.replicas * self.node_count)
        return IncentiveSignal(flat(alpha), flat(beta))

    def solve_agents(self, mu, cfg: Optional[SolverConfig] = None):
        tol = 1e-8 if cfg is None else cfg.inner_tol
        cap = 10_000 if cfg is None else cfg.inner_max_iter
        return self.population.solve(self.signal(mu), tol=tol, max_iter=cap)

    def device_costs(self, p, q):
        """Total device cost per replica, shape (C,)."""
        pop = self.population
        per = np.zeros(pop.size)
        if pop.pv.size:
            r = pop.pv_rows
            short = pop.pv.p_avail - p[r]
            per[r] = np.sum(pop.pv.c_p[:, None] * short**2 + pop.pv.c_q[:, None] * q[r] ** 2, axis=1)
        if pop.chain.size:
            r = pop.chain_rows
            dev = pop.chain.states(p[r]) - pop.chain.nom[:, None]
            per[r] = pop.chain.weight * np.sum(dev * dev, axis=1)
        return per.reshape(self.replicas, len(self.devices)).sum(axis=1)

    def dual_gradient(self, mu, phi=0.0, cfg=None):
        """g(z*(mu)) - phi mu for the relaxed optimum z*(mu)."""
        mu = self._batch(mu)
        p, q = self.solve_agents(mu, cfg)
        return self._unbatch(self.g(p, q) - phi * mu)

    def dual_value(self, mu, phi=0.0, cfg=None):
        """Regularized dual function C(z*) + mu.g(z*) - phi/2 |mu|^2."""
        mu = self._batch(mu)
        p, q = self.solve_agents(mu, cfg)
        g = self.g(p, q)
        val = self.device_costs(p, q) + np.sum(mu * g, axis=(1, 2)) - 0.5 * phi * np.sum(mu * mu, axis=(1, 2))
        return float(val[0]) if self.replicas == 1 else val

    def _batch(self, mu):
        mu = np.asarray(mu, dtype=float)
        if mu.ndim == 2:
            mu = mu[None]
        if mu.shape != (self.replicas, self.slots, self.rows):
            raise DimensionError(f"multipliers have shape {mu.shape}")
        return mu

    def _unbatch(self, x):
        return x[0] if self.replicas == 1 else x


@dataclass
class OfflineResult:
    dual: DualState
    relaxed_p: np.ndarray
    relaxed_q: np.ndarray
    realized_p: np.ndarray
    realized_q: np.ndarray
    iterations: int
    converged: bool
    log: dict = field(default_factory=dict)


def slater_check(problem: WindowProblem, polygon_sides: int = 32) -> float:
    """Largest uniform slack t with g(z) + t <= 0 over the relaxed device sets.

    The PV disk is replaced by an inscribed polygon, so a positive result
    certifies strict feasibility. Raises :class:`SlaterError` when t <= 0.
    """
    if problem.replicas != 1:
        raise ValueError("run the check on an unreplicated problem")
    pop = problem.population
    S, n = problem.slots, pop.size
    if pop.chain.size:
        check_reachability(pop.chain)
    pv_pos = {int(r): j for j, r in enumerate(pop.pv_rows)}
    # variable layout: p[d, s] for every device, then q[pv, s], then t
    n_p = n * S
    n_q = pop.pv.size * S
    nv = n_p + n_q + 1
    pidx = lambda d, s: d * S + s
    qidx = lambda j, s: n_p + j * S + s
    lb = np.zeros(nv)
    ub = np.zeros(nv)
    for d in range(n):
        if d in pv_pos:
            j = pv_pos[d]
            lb[pidx(d, 0) : pidx(d, 0) + S] = 0.0
            ub[pidx(d, 0) : pidx(d, 0) + S] = np.minimum(pop.pv.p_avail[j], pop.pv.eta[j])
            lb[qidx(j, 0) : qidx(j, 0) + S] = -pop.pv.eta[j]
            ub[qidx(j, 0) : qidx(j, 0) + S] = pop.pv.eta[j]
    for j, d in enumerate(pop.chain_rows):
        lb[pidx(d, 0) : pidx(d, 0) + S] = pop.chain.pmin[j]
        ub[pidx(d, 0) : pidx(d, 0) + S] = pop.chain.pmax[j]
    lb[-1], ub[-1] = -np.inf, 1.0

    rows, cols, vals, rhs = [], [], [], []
    r = 0
    # network rows: g_s + t <= 0
    M = problem.rows
    g0 = problem.g(np.zeros((n, S)), np.zeros((n, S)))[0]
    base = problem.model.base_kva
    for s in range(S):
        for d in range(n):
            col = problem.jp[:, pop.nodes[d] - 1] * pop.sign[d] / base
            nz = np.flatnonzero(col)
            rows.extend(r + nz)
            cols.extend([pidx(d, s)] * nz.size)
            vals.extend(col[nz])
        for j, d in enumerate(pop.pv_rows):
            col = problem.jq[:, pop.nodes[d] - 1] / base
            nz = np.flatnonzero(col)
            rows.extend(r + nz)
            cols.extend([qidx(j, s)] * nz.size)
            vals.extend(col[nz])
        rows.extend(r + np.arange(M))
        cols.extend([nv - 1] * M)
        vals.extend([1.0] * M)
        rhs.extend(-g0[s])
        r += M
    net_rows = r
    # PV inscribed polygon
    ang = 2 * np.pi * np.arange(polygon_sides) / polygon_sides
    shrink = math.cos(np.pi / polygon_sides)
    for j in range(pop.pv.size):
        d = int(pop.pv_rows[j])
        for s in range(S):
            for th in ang:
                rows.extend([r, r])
                cols.extend([pidx(d, s), qidx(j, s)])
                vals.extend([math.cos(th), math.sin(th)])
                rhs.append(pop.pv.eta[j] * shrink)
                r += 1
    # chain state bands
    if pop.chain.size:
        xfree = pop.chain.states(np.zeros((pop.chain.size, S)))
        for j, d in enumerate(pop.chain_rows):
            G = propagation_matrix(pop.chain.a[j], pop.chain.k[j], S)
            for m in range(S):
                for sgn, bound in ((1.0, pop.chain.hi[j, m] - xfree[j, m]), (-1.0, xfree[j, m] - pop.chain.lo[j, m])):
                    nz = np.flatnonzero(G[m])
                    rows.extend([r] * nz.size)
                    cols.extend(pidx(d, 0) + nz)
                    vals.extend(sgn * G[m, nz])
                    rhs.append(bound)
                    r += 1
    A_ub = sp.csr_matrix((vals, (rows, cols)), shape=(r, nv))
    cost = np.zeros(nv)
    cost[-1] = -1.0
    res = scipy.optimize.linprog(cost, A_ub=A_ub, b_ub=np.array(rhs), bounds=np.column_stack([lb, ub]), method="highs")
    if res.status != 0:
        raise SlaterError(-np.inf, [])
    t = float(res.x[-1])
    if t <= 0:
        resid = A_ub[:net_rows] @ res.x - np.array(rhs[:net_rows])
        binding = [int(i) for i in np.flatnonzero(np.abs(resid) <= 1e-9)]
        raise SlaterError(t, binding)
    return t


def estimate_sigma_h(problem: WindowProblem, phi: float, probes: Sequence[np.ndarray], cfg=None) -> float:
    """Smallest secant ratio -<grad h(a) - grad h(b), a - b>/|a - b|^2 over probe pairs."""
    grads = [problem.dual_gradient(m, phi, cfg) for m in probes]
    best = np.inf
    for i in range(len(probes)):
        for j in range(i + 1, len(probes)):
            dm = probes[i] - probes[j]
            nrm = float(np.sum(dm * dm))
            if nrm > 0:
                best = min(best, -float(np.sum((grads[i] - grads[j]) * dm)) / nrm)
    return max(best, phi) if np.isfinite(best) else phi


def check_stepsize(problem: WindowProblem, cfg: SolverConfig, mu_ref=None):
    """Compare epsilon with 2 sigma_h / L^2; warn, or raise in strict mode.

    Returns (limit, sigma_h, L).
    """
    from .analysis import sigma_c_population, sigma_g_population

    sc = sigma_c_population(problem.population, problem.slots)
    sg = sigma_g_population(problem.spec, problem.model, problem.population, problem.slots)
    L = sg**2 / sc + cfg.phi
    if cfg.sigma_h is not None:
        sh = cfg.sigma_h
    else:
        base = np.zeros((problem.slots, problem.rows)) if mu_ref is None else np.asarray(mu_ref)
        rng = np.random.default_rng(0)
        scale = max(1.0, float(np.abs(base).max()))
        probes = [base] + [np.maximum(0.0, base + scale * rng.uniform(0, 1, base.shape)) for _ in range(3)]
        sh = estimate_sigma_h(problem, cfg.phi, probes, cfg)
    limit = 2 * sh / L**2 if L > 0 else np.inf
    if not cfg.epsilon < limit:
        if cfg.strict:
            raise StepsizeError(cfg.epsilon, limit)
        warnings.warn(
            f"stepsize {cfg.epsilon:.4g} is not below the estimated limit {limit:.4g} "
            f"(sigma_h {sh:.4g}, L {L:.4g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return limit, sh, L


def run_offline(
    problem: WindowProblem,
    cfg: SolverConfig,
    seed: int = 0,
    mu0=None,
    randomize: bool = True,
    log_level: str = "full",
    slater: bool = True,
    callback=None,
) -> OfflineResult:
    """Offline distributed loop over one window.

    Each iteration: agents solve their relaxed problems for the current
    signals, discrete devices draw a first-slot setpoint, the operator
    aggregates, predicts voltages, takes a projected dual step and emits new
    signals. Stops when the dual step norm is at most ``cfg.stop_delta`` (for
    every replica) or after ``cfg.max_iters`` iterations.

    ``log_level`` is "full" (multipliers, relaxed and realized powers and g
    every iteration), "dual" (multipliers only) or "none".
    """
    if slater and problem.replicas == 1:
        slater_check(problem)
    if cfg.check_stepsize and (cfg.strict or cfg.sigma_h is not None):
        check_stepsize(problem, cfg)
    C, S, M = problem.replicas, problem.slots, problem.rows
    mu = np.zeros((C, S, M)) if mu0 is None else np.broadcast_to(np.asarray(mu0, dtype=float), (C, S, M)).copy()
    streams = DeviceStreams(seed, problem.population.size)
    record = {"mu": [], "relaxed_p": [], "relaxed_q": [], "realized_p": [], "realized_q": [], "g": []}
    pop = problem.population
    converged = False
    k = 0
    p = q = realized_p = None
    for k in range(1, cfg.max_iters + 1):
        p, q = problem.solve_agents(mu, cfg)
        if randomize and pop.chain.size:
            dec = pop.randomize(p, q, streams)
            realized_p = dec.realized_p
        else:
            realized_p = p
        g = problem.g(realized_p, q)
        new = np.maximum(0.0, mu + cfg.epsilon * (g - cfg.phi * mu))
        step = np.sqrt(np.sum((new - mu) ** 2, axis=(1, 2)))
        mu = new
        if log_level == "full":
            record["mu"].append(mu.copy())
            record["relaxed_p"].append(p)
            record["relaxed_q"].append(q)
            record["realized_p"].append(realized_p)
            record["g"].append(g)
        elif log_level == "dual":
            record["mu"].append(mu.copy())
        if callback is not None:
            callback(k, mu)
        if np.all(step <= cfg.stop_delta):
            converged = True
            break
    out = {key: np.array(val) for key, val in record.items() if val}
    if C == 1:
        out = {key: (val[:, 0] if key in ("mu", "g") else val) for key, val in out.items()}
        mu_out = mu[0]
    else:
        mu_out = mu
    # final relaxed primal corresponds to the final multipliers
    p, q = problem.solve_agents(mu, cfg)
    return OfflineResult(DualState(mu_out, k), p, q, realized_p, q, k, converged, out)

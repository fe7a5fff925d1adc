"""Nonlinear radial feeder used as the measured plant, and its LinDistFlow linearization.

Branch-flow (DistFlow) equations on a tree, with line j feeding node j from
its parent. Let P_j, Q_j be the sending-end flows on line j, l_j the squared
current and v_j the squared voltage magnitude. Then

    P_j = sum over the subtree of j of (consumption + r l)
    l_j = (P_j^2 + Q_j^2) / v_parent(j)
    v_j = v_parent(j) - 2 (r_j P_j + x_j Q_j) + (r_j^2 + x_j^2) l_j

and the solver iterates these to a fixed point starting from l = 0. The
iteration converges for loading well below the feeder's voltage-collapse
point; as a rule of thumb keep the no-loss voltage drop under 20%.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConvergenceError, DimensionError
from .grid import LinearGridModel, NodalInjection


@dataclass(frozen=True)
class FeederPhysical:
    """Radial feeder: ``parents[i - 1]`` is the parent of node i (0 = substation).

    Line i connects node i to its parent and has impedance ``r_ohm[i - 1]``,
    ``x_ohm[i - 1]``. ``v0`` is the substation voltage magnitude (p.u.).
    """

    parents: np.ndarray
    r_ohm: np.ndarray
    x_ohm: np.ndarray
    v0: float = 1.0
    base_kva: float = 1000.0
    base_kv: float = 4.8
    subtree: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        par = np.asarray(self.parents, dtype=int).reshape(-1)
        r = np.asarray(self.r_ohm, dtype=float).reshape(-1)
        x = np.asarray(self.x_ohm, dtype=float).reshape(-1)
        n = par.size
        if r.shape != (n,) or x.shape != (n,):
            raise DimensionError("one resistance and reactance per line is required")
        if np.any(r <= 0) or np.any(x <= 0):
            raise ValueError("line impedances must be positive")
        if np.any(par < 0) or np.any(par > n) or np.any(par == np.arange(1, n + 1)):
            raise ValueError("parents must reference nodes 0..N other than the node itself")
        if self.base_kva <= 0 or self.base_kv <= 0 or not 0.5 < self.v0 < 1.5:
            raise ValueError("invalid base values or substation voltage")
        M = np.zeros((n, n))
        for node in range(1, n + 1):
            seen = set()
            j = node
            while j != 0:
                if j in seen:
                    raise ValueError(f"cycle through node {j}: topology must be a tree rooted at 0")
                seen.add(j)
                M[j - 1, node - 1] = 1.0
                j = par[j - 1]
        for name, val in (("parents", par), ("r_ohm", r), ("x_ohm", x), ("subtree", M)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def node_count(self) -> int:
        return self.parents.size

    @property
    def z_base(self) -> float:
        return self.base_kv**2 * 1000.0 / self.base_kva

    @property
    def r_pu(self) -> np.ndarray:
        return self.r_ohm / self.z_base

    @property
    def x_pu(self) -> np.ndarray:
        return self.x_ohm / self.z_base

    def depth_order(self) -> np.ndarray:
        """Nodes sorted so that every parent precedes its children."""
        depth = self.subtree.sum(axis=0)
        return np.argsort(depth, kind="stable") + 1


@dataclass(frozen=True)
class Measurement:
    v: np.ndarray
    slot: int = 0
    noise: float = 0.0


def solve_ac(feeder: FeederPhysical, inj, tol: float = 1e-10, max_sweeps: int = 200) -> np.ndarray:
    """Voltage magnitudes (p.u.) for net injections ``inj`` (NodalInjection or (p, q) arrays).

    Arrays may carry leading batch dimensions, e.g. (T, N).
    """
    if isinstance(inj, NodalInjection):
        p, q = inj.p, inj.q
    else:
        p, q = (np.asarray(a, dtype=float) for a in inj)
    if p.shape[-1] != feeder.node_count or q.shape != p.shape:
        raise DimensionError(f"injection shape {p.shape} does not match {feeder.node_count} nodes")
    M = feeder.subtree
    r, x = feeder.r_pu, feeder.x_pu
    z2 = r * r + x * x
    v0sq = feeder.v0**2
    par = feeder.parents
    ell = np.zeros_like(p)
    V_old = np.full(p.shape, np.inf)
    resid = np.inf
    for sweep in range(1, max_sweeps + 1):
        P = (-p + r * ell) @ M.T
        Q = (-q + x * ell) @ M.T
        v = v0sq - (2 * (r * P + x * Q) - z2 * ell) @ M
        if np.any(v <= 0):
            raise ConvergenceError("DistFlow sweep (voltage collapse)", sweep, np.inf)
        V = np.sqrt(v)
        resid = float(np.max(np.abs(V - V_old)))
        if resid <= tol:
            return V
        V_old = V
        vpar = np.concatenate([np.full(p.shape[:-1] + (1,), v0sq), v], axis=-1)[..., par]
        ell = (P * P + Q * Q) / vpar
    raise ConvergenceError("DistFlow sweep", max_sweeps, resid)


def path_matrices(feeder: FeederPhysical):
    """R[i, j], X[i, j]: resistance and reactance (p.u.) shared by the paths of i and j to the root."""
    M = feeder.subtree
    return M.T @ (feeder.r_pu[:, None] * M), M.T @ (feeder.x_pu[:, None] * M)


def linearize(feeder: FeederPhysical, quantity: str = "magnitude") -> LinearGridModel:
    """LinDistFlow sensitivities.

    ``quantity="squared"`` gives the native map v ~ v0^2 + 2 R p + 2 X q for
    squared magnitudes. ``quantity="magnitude"`` divides by 2 v0 to map onto
    magnitudes: V ~ v0 + (R p + X q) / v0.
    """
    R, X = path_matrices(feeder)
    n = feeder.node_count
    if quantity == "squared":
        return LinearGridModel(2 * R, 2 * X, np.full(n, feeder.v0**2), feeder.base_kva, "squared")
    if quantity == "magnitude":
        return LinearGridModel(R / feeder.v0, X / feeder.v0, np.full(n, feeder.v0), feeder.base_kva, "magnitude")
    raise ValueError(f"unknown quantity {quantity!r}")


def measure(
    feeder: FeederPhysical,
    inj: NodalInjection,
    noise_seed: Optional[int] = None,
    noise: float = 0.0,
    tol: float = 1e-10,
) -> Measurement:
    """Plant voltages plus optional zero-mean uniform noise in [-noise, noise]."""
    v = solve_ac(feeder, inj, tol=tol)
    if noise > 0:
        v = v + np.random.default_rng(noise_seed).uniform(-noise, noise, v.shape)
    return Measurement(v, inj.slot if isinstance(inj, NodalInjection) else 0, noise)

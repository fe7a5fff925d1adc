"""Linearized network map, nodal power aggregation and the voltage constraint g.

Node numbering follows the feeder convention: node 0 is the substation and is
not part of any vector; controllable nodes are 1..N and live at array index
``node - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, InvalidNodeError


@dataclass(frozen=True)
class LinearGridModel:
    """Sensitivity triple mapping nodal injections to voltages, y = A p + B q + c.

    ``A`` and ``B`` are in p.u. voltage per p.u. power on a ``base_kva`` base.
    ``quantity`` records whether ``y`` is a voltage magnitude or a squared
    magnitude (the native LinDistFlow coordinate).
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    base_kva: float = 1.0
    quantity: str = "magnitude"

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        c = np.array(self.c, dtype=float).reshape(-1)
        n = c.shape[0]
        if A.shape != (n, n) or B.shape != (n, n):
            raise DimensionError(f"A {A.shape} and B {B.shape} must both be {n}x{n}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(c))):
            raise ValueError("A, B and c must be finite")
        if np.any(c <= 0.5) or np.any(c >= 1.5):
            raise ValueError("no-injection baseline c must lie in (0.5, 1.5) p.u.")
        if self.base_kva <= 0:
            raise ValueError("base_kva must be positive")
        if self.quantity not in ("magnitude", "squared"):
            raise ValueError(f"unknown quantity {self.quantity!r}")
        for name, val in (("A", A), ("B", B), ("c", c)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def node_count(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class ConstraintSpec:
    """Two-sided voltage limits, optionally with tightened operating limits.

    ``rows`` selects which of the 2N stacked rows (N upper rows followed by N
    lower rows) are enforced; ``None`` enforces all of them.
    """

    v_upper: np.ndarray
    v_lower: np.ndarray
    v_upper_tight: Optional[np.ndarray] = None
    v_lower_tight: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None

    def __post_init__(self):
        up = np.array(self.v_upper, dtype=float).reshape(-1)
        lo = np.array(self.v_lower, dtype=float).reshape(-1)
        n = up.shape[0]
        if lo.shape != (n,):
            raise DimensionError("v_upper and v_lower lengths differ")
        if np.any(lo >= up):
            raise ValueError("v_lower must be strictly below v_upper")
        object.__setattr__(self, "v_upper", up)
        object.__setattr__(self, "v_lower", lo)
        if (self.v_upper_tight is None) != (self.v_lower_tight is None):
            raise ValueError("tightened bounds must be given as a pair")
        if self.v_upper_tight is not None:
            upt = np.broadcast_to(np.asarray(self.v_upper_tight, dtype=float), (n,)).copy()
            lot = np.broadcast_to(np.asarray(self.v_lower_tight, dtype=float), (n,)).copy()
            if not (np.all(lo < lot) and np.all(lot < upt) and np.all(upt < up)):
                raise ValueError("tightened bounds must satisfy v_lower < v_lower' < v_upper' < v_upper")
            object.__setattr__(self, "v_upper_tight", upt)
            object.__setattr__(self, "v_lower_tight", lot)
        if self.rows is not None:
            rows = np.unique(np.asarray(self.rows, dtype=int))
            if rows.size == 0 or rows.min() < 0 or rows.max() >= 2 * n:
                raise ValueError(f"rows must index into 0..{2 * n - 1}")
            object.__setattr__(self, "rows", rows)

    @classmethod
    def uniform(cls, n, lower=0.95, upper=1.05, lower_tight=None, upper_tight=None, rows=None):
        kw = {}
        if lower_tight is not None or upper_tight is not None:
            kw = dict(v_lower_tight=np.full(n, lower_tight), v_upper_tight=np.full(n, upper_tight))
        return cls(np.full(n, float(upper)), np.full(n, float(lower)), rows=rows, **kw)

    @property
    def node_count(self) -> int:
        return self.v_upper.shape[0]

    @property
    def tightened(self) -> bool:
        return self.v_upper_tight is not None

    @property
    def upper_eff(self) -> np.ndarray:
        return self.v_upper_tight if self.tightened else self.v_upper

    @property
    def lower_eff(self) -> np.ndarray:
        return self.v_lower_tight if self.tightened else self.v_lower

    @property
    def row_count(self) -> int:
        return 2 * self.node_count if self.rows is None else int(self.rows.size)

    @property
    def row_index(self) -> np.ndarray:
        return np.arange(2 * self.node_count) if self.rows is None else self.rows


@dataclass(frozen=True)
class NodalInjection:
    """Net nodal injections in p.u. (positive = into the network)."""

    p: np.ndarray
    q: np.ndarray
    slot: int = 0

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1)
        q = np.array(self.q, dtype=float).reshape(-1)
        if p.shape != q.shape:
            raise DimensionError("p and q lengths differ")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("injections must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def node_count(self) -> int:
        return self.p.shape[0]


def _node_index(node, name, n):
    if isinstance(node, bool) or int(node) != node or not 1 <= int(node) <= n:
        raise InvalidNodeError(name, node, n)
    return int(node) - 1


def aggregate_node_power(
    baseline: NodalInjection,
    device_setpoints: Iterable[Sequence],
    base_kva: float = 1.0,
) -> NodalInjection:
    """Add device injections (kW / kvar) to the uncontrollable baseline (p.u.).

    Each entry of ``device_setpoints`` is ``(node, p, q)`` or
    ``(name, node, p, q)``. Sums are exactly rounded (``math.fsum``) so the
    result does not depend on the order of the devices.
    """
    n = baseline.node_count
    p_terms = [[x] for x in baseline.p.tolist()]
    q_terms = [[x] for x in baseline.q.tolist()]
    for k, entry in enumerate(device_setpoints):
        if len(entry) == 4:
            name, node, p, q = entry
        else:
            node, p, q = entry
            name = k
        i = _node_index(node, name, n)
        p_terms[i].append(float(p) / base_kva)
        q_terms[i].append(float(q) / base_kva)
    return NodalInjection(
        np.array([math.fsum(t) for t in p_terms]),
        np.array([math.fsum(t) for t in q_terms]),
        baseline.slot,
    )


@dataclass
class Aggregator:
    """Vectorized aggregation for a fixed device roster.

    Works on arrays with a trailing device axis; devices are summed through a
    fixed incidence matrix so results are deterministic run to run.
    """

    nodes: np.ndarray
    node_count: int
    base_kva: float = 1.0
    incidence: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=int)
        for k, node in enumerate(self.nodes):
            _node_index(node, k, self.node_count)
        inc = np.zeros((self.nodes.size, self.node_count))
        inc[np.arange(self.nodes.size), self.nodes - 1] = 1.0 / self.base_kva
        self.incidence = inc

    def __call__(self, device_kw: np.ndarray) -> np.ndarray:
        """Map (..., n_devices) kW injections to (..., N) p.u. nodal sums."""
        return np.asarray(device_kw, dtype=float) @ self.incidence


def _check_dims(model: LinearGridModel, n: int):
    if n != model.node_count:
        raise DimensionError(f"injection has {n} nodes, model has {model.node_count}")


def linearized_state(model: LinearGridModel, inj: NodalInjection) -> np.ndarray:
    _check_dims(model, inj.node_count)
    return model.A @ inj.p + model.B @ inj.q + model.c


def linearized_state_arrays(model: LinearGridModel, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Same as :func:`linearized_state` for (..., N) arrays of injections."""
    p = np.asarray(p, dtype=float)
    _check_dims(model, p.shape[-1])
    return p @ model.A.T + np.asarray(q, dtype=float) @ model.B.T + model.c


def constraint_value(spec: ConstraintSpec, y: np.ndarray) -> np.ndarray:
    """Stacked (y - upper, lower - y) over the enforced rows; g <= 0 iff within bounds."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != spec.node_count:
        raise DimensionError(f"state has {y.shape[-1]} nodes, constraint spec has {spec.node_count}")
    g = np.concatenate([y - spec.upper_eff, spec.lower_eff - y], axis=-1)
    if spec.rows is not None:
        g = g[..., spec.rows]
    return g


def constraint_jacobian(spec: ConstraintSpec, model: LinearGridModel):
    """Return (dg/dp, dg/dq), each rows x N; constant because g is affine."""
    if spec.node_count != model.node_count:
        raise DimensionError("constraint spec and model sizes differ")
    jp = np.vstack([model.A, -model.A])
    jq = np.vstack([model.B, -model.B])
    if spec.rows is not None:
        jp, jq = jp[spec.rows], jq[spec.rows]
    return jp, jq


def jacobian_norm(spec: ConstraintSpec, model: LinearGridModel) -> float:
    jp, jq = constraint_jacobian(spec, model)
    return float(np.sqrt(np.sum(jp**2) + np.sum(jq**2)))

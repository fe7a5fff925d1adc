import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dercoord.errors import DimensionError, InvalidNodeError
from dercoord.grid import (
    Aggregator,
    ConstraintSpec,
    LinearGridModel,
    NodalInjection,
    aggregate_node_power,
    constraint_jacobian,
    constraint_value,
    jacobian_norm,
    linearized_state,
    linearized_state_arrays,
)
from dercoord.scenario import load_scenario


def test_aggregate_empty_device_list_returns_baseline():
    out = aggregate_node_power(NodalInjection([0.1, -0.2], [0.0, 0.0]), [])
    np.testing.assert_array_equal(out.p, [0.1, -0.2])


def test_aggregate_single_devices():
    out = aggregate_node_power(NodalInjection([0, 0], [0, 0]), [(1, -0.05, 0.0), (2, 0.03, 0.0)])
    np.testing.assert_array_equal(out.p, [-0.05, 0.03])


def test_aggregate_invalid_node_names_device():
    with pytest.raises(InvalidNodeError, match="bat7"):
        aggregate_node_power(NodalInjection([0, 0], [0, 0]), [("bat7", 3, 1.0, 0.0)])


def test_aggregate_37_node_roster_matches_reordered_sum():
    scn = load_scenario("ieee37")
    rng = np.random.default_rng(0)
    n = len(scn.devices)
    p = rng.uniform(-5, 5, n)
    q = rng.uniform(-5, 5, n)
    entries = [(d.name, d.node, p[i], q[i]) for i, d in enumerate(scn.devices)]
    base = NodalInjection(scn.timeline.p0[100], scn.timeline.q0[100])
    out = aggregate_node_power(base, entries, base_kva=1000.0)
    perm = rng.permutation(n)
    out2 = aggregate_node_power(base, [entries[i] for i in perm], base_kva=1000.0)
    np.testing.assert_array_equal(out.p, out2.p)
    np.testing.assert_array_equal(out.q, out2.q)
    # independent oracle: exact rational sums per node
    from fractions import Fraction

    for node in (2, 20, 36):
        terms = [Fraction(float(base.p[node - 1]))] + [
            Fraction(float(p[i])) / 1000 for i, d in enumerate(scn.devices) if d.node == node
        ]
        assert out.p[node - 1] == float(sum(terms))


def test_aggregator_matches_scalar_aggregation():
    nodes = np.array([1, 2, 2, 3])
    agg = Aggregator(nodes, 3, base_kva=10.0)
    kw = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(agg(kw), [0.1, 0.5, 0.4])


def test_linearized_state_zero_injection_is_c():
    m = LinearGridModel(np.eye(2), np.eye(2), [1.0, 1.02])
    np.testing.assert_array_equal(linearized_state(m, NodalInjection([0, 0], [0, 0])), [1.0, 1.02])


def test_linearized_state_hand_product():
    m = LinearGridModel([[0.1, 0.05], [0.05, 0.1]], np.zeros((2, 2)), [1.0, 1.0])
    np.testing.assert_allclose(linearized_state(m, NodalInjection([0.1, 0.0], [0, 0])), [1.01, 1.005], atol=1e-15)


def test_linearized_state_dimension_error():
    m = LinearGridModel(np.eye(2), np.eye(2), [1.0, 1.0])
    with pytest.raises(DimensionError):
        linearized_state(m, NodalInjection([0, 0, 0], [0, 0, 0]))


def test_linearization_close_to_plant_on_37_node():
    from dercoord.plant import solve_ac

    scn = load_scenario("ieee37")
    tl = scn.timeline
    for t in (0, 20000, 30000):
        v = solve_ac(scn.feeder, (tl.p0[t], tl.q0[t]))
        y = linearized_state_arrays(scn.model, tl.p0[t], tl.q0[t])
        assert np.max(np.abs(v - y)) < 0.01


def test_constraint_value_at_upper_bound():
    spec = ConstraintSpec.uniform(3, 0.95, 1.05)
    g = constraint_value(spec, spec.upper_eff)
    np.testing.assert_array_equal(g[:3], 0.0)


def test_constraint_value_arithmetic():
    spec = ConstraintSpec.uniform(1, 0.95, 1.05)
    np.testing.assert_allclose(constraint_value(spec, np.array([1.06])), [0.01, -0.11], atol=1e-12)


def test_constraint_value_matches_loop():
    rng = np.random.default_rng(1)
    spec = ConstraintSpec(rng.uniform(1.03, 1.06, 5), rng.uniform(0.94, 0.97, 5))
    y = rng.uniform(0.9, 1.1, 5)
    g = constraint_value(spec, y)
    for i in range(5):
        assert g[i] == y[i] - spec.v_upper[i]
        assert g[5 + i] == spec.v_lower[i] - y[i]


def test_constraint_rows_mask():
    spec = ConstraintSpec.uniform(3, rows=[0, 4])
    assert constraint_value(spec, np.ones(3)).shape == (2,)


def test_jacobian_identity():
    m = LinearGridModel(np.eye(2), np.zeros((2, 2)), [1.0, 1.0])
    jp, jq = constraint_jacobian(ConstraintSpec.uniform(2), m)
    np.testing.assert_array_equal(jp, np.vstack([np.eye(2), -np.eye(2)]))
    assert np.all(jq == 0)
    assert np.isfinite(jacobian_norm(ConstraintSpec.uniform(2), m))


def test_tightened_bounds_validated():
    with pytest.raises(ValueError):
        ConstraintSpec.uniform(2, 0.95, 1.05, lower_tight=0.94, upper_tight=1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_constraint_is_affine_in_injections(lam, seed):
    rng = np.random.default_rng(seed)
    n = 4
    R = rng.uniform(0, 0.05, (n, n))
    m = LinearGridModel(R + R.T, R.T @ R, np.full(n, 1.0))
    spec = ConstraintSpec.uniform(n)
    z1 = rng.normal(size=(2, n))
    z2 = rng.normal(size=(2, n))
    g = lambda z: constraint_value(spec, linearized_state_arrays(m, z[0], z[1]))
    mix = g(lam * z1 + (1 - lam) * z2)
    np.testing.assert_allclose(mix, lam * g(z1) + (1 - lam) * g(z2), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.floats(-10, 10), st.floats(-10, 10)), max_size=30), st.randoms())
def test_aggregation_order_independent(entries, rnd):
    base = NodalInjection([0.01, -0.02, 0.3], [0.0, 0.1, -0.1])
    shuffled = list(entries)
    rnd.shuffle(shuffled)
    a = aggregate_node_power(base, entries, 7.0)
    b = aggregate_node_power(base, shuffled, 7.0)
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.q, b.q)

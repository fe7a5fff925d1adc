import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import battery, four_node_feeder, pv_devices
from dercoord.analysis import (
    AnalysisConstants,
    BoundReport,
    compute_delta,
    compute_sigma_c,
    delta_from_jacobian,
    device_jacobian,
    device_modulus,
    estimate_trace_constants,
    lipschitz_ratio,
    offline_asymptote,
    online_asymptote,
    randomization_variance,
    robust_bounds,
    sigma_c_population,
    sigma_g_population,
    stepsize_limit,
)
from dercoord.agent import bracket
from dercoord.coordinator import WindowProblem
from dercoord.devices import BatteryParams, Device, HvacParams, PvParams, device_cost
from dercoord.errors import DercoordError, InfeasibleTighteningError, StepsizeError
from dercoord.grid import ConstraintSpec
from dercoord.online import OnlineConfig, OnlineEngine, ScenarioTimeline
from dercoord.plant import linearize

# Strong convexity


def test_sigma_c_single_pv():
    assert compute_sigma_c([Device("pv", 1, PvParams([1.0], 2.0, 1.0, 1.0))]) == 2.0


def test_sigma_c_single_battery_one_slot():
    b = BatteryParams(20.0, [-4, 0, 4], c_b=1.0, slot_hours=0.25)
    kappa = 0.25 / 20.0
    assert compute_sigma_c([Device("b", 1, b, x0=0.5)], slots=1) == pytest.approx(2 * kappa**2, rel=1e-12)


def test_sigma_c_mixed_fleet_matches_sampled_hessians():
    rng = np.random.default_rng(0)
    S = 3
    devs = [
        Device("pv", 1, PvParams(np.full(S, 100.0), 200.0, 0.3, 0.2)),
        Device("h", 1, HvacParams(0.1, -1.0, 4.0, np.full(S, 85.0), c_t=0.05, zeta_out=0.1), x0=75.0),
        Device("b", 1, BatteryParams(20.0, [-4, 0, 4], c_b=20.0), x0=0.5),
    ]
    sc = compute_sigma_c(devs, S)
    assert sc == min(device_modulus(d, S) for d in devs)
    for d in devs:
        shape = (S, 2) if d.kind == "pv" else (S,)
        ratios = []
        for _ in range(100):
            z = rng.uniform(0, 4, shape)
            u = rng.normal(size=shape)
            u /= np.linalg.norm(u)
            h = 1e-3
            # exact second difference for a quadratic: f(z+hu) - 2 f(z) + f(z-hu) = h^2 u'Hu
            f = lambda x: device_cost(d.params, x, d.x0)[0]
            ratios.append((f(z + h * u) - 2 * f(z) + f(z - h * u)) / h**2)
        assert min(ratios) >= device_modulus(d, S) * (1 - 1e-4) - 1e-12
        assert min(ratios) >= sc * (1 - 1e-4) - 1e-12


def test_sigma_c_rejects_empty_roster():
    with pytest.raises(ValueError):
        compute_sigma_c([])


# Randomization variance


def test_delta_zero_without_discrete_devices():
    model = linearize(four_node_feeder())
    assert compute_delta(ConstraintSpec.uniform(4), model, pv_devices(1)).bound == 0.0


def test_delta_formula_arithmetic():
    d = delta_from_jacobian(np.array([[0.02]]), [4.0])
    assert d.bound == pytest.approx(0.0016, rel=1e-12)
    assert d.tight == pytest.approx(0.0016, rel=1e-12)


def test_delta_dominates_monte_carlo_variance():
    model = linearize(four_node_feeder())
    spec = ConstraintSpec.uniform(4, 0.95, 1.02)
    devs = [battery(f"b{i}", i, rates=(-4.0, 0.0, 4.0)) for i in (1, 2, 3, 4)]
    delta = compute_delta(spec, model, devs)
    R, _ = device_jacobian(spec, model, devs)
    p_star = np.array([1.3, -2.2, 0.4, 3.9])
    sp = np.tile([-4.0, 0.0, 4.0], (4, 1))
    lo, hi, prob = bracket(p_star, sp)
    u = np.random.default_rng(0).random((10_000, 4))
    draws = np.where(u < prob, hi, lo)
    g = draws @ R.T
    empirical = float(np.sum(g.var(axis=0)))
    exact = randomization_variance(R, p_star, lo, hi)
    assert empirical == pytest.approx(exact, rel=0.05)
    assert exact <= delta.tight <= delta.bound
    np.testing.assert_allclose(prob * (1 - prob) * (hi - lo) ** 2, (p_star - lo) * (hi - p_star))


# Stepsize and asymptotes


def test_stepsize_limit_at_lemma2_edge():
    c = AnalysisConstants(sigma_c=2.0, sigma_g=3.0, sigma_h=4.5 + 0.5, phi=0.5)
    assert c.L == 5.0
    assert stepsize_limit(c) == pytest.approx(2 / 5.0)


def test_stepsize_limit_scales_with_inverse_fourth_power_of_sigma_g():
    a = stepsize_limit(AnalysisConstants(1.0, 1.0, 0.3))
    b = stepsize_limit(AnalysisConstants(1.0, 2.0, 0.3))
    assert b == pytest.approx(a / 16)


def test_offline_asymptote_zero_without_randomization():
    c = AnalysisConstants(1.0, 1.0, 0.5)
    assert offline_asymptote(c, 0.5) == 0.0


def test_offline_asymptote_rejects_inadmissible_step():
    with pytest.raises(StepsizeError):
        offline_asymptote(AnalysisConstants(1.0, 1.0, 0.5, Delta=1.0), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.98))
def test_offline_asymptote_increasing_in_epsilon(frac):
    c = AnalysisConstants(1.0, 1.0, 0.5, Delta=0.3)
    lim = stepsize_limit(c)
    e1, e2 = frac * lim, min(frac * lim * 1.01, 0.999 * lim)
    assert offline_asymptote(c, e2) >= offline_asymptote(c, e1)


def test_online_asymptote_cases():
    c0 = AnalysisConstants(1.0, 1.0, 0.5)
    assert online_asymptote(c0, 0.5) == 0.0
    c = AnalysisConstants(1.0, 1.0, 0.5, e=0.01)
    for eps in (0.2, 0.5):
        assert online_asymptote(c, eps) == pytest.approx(0.01 / (2 * eps * 0.5 - eps**2))


def test_lemma2_flag():
    assert AnalysisConstants(1.0, 1.0, 0.9).lemma2_holds()
    assert not AnalysisConstants(1.0, 1.0, 1.5).lemma2_holds()
    with pytest.raises(ValueError):
        AnalysisConstants(-1.0, 1.0, 1.0)


# Robust bounds


def test_robust_bounds_zero_variance_unchanged():
    spec = ConstraintSpec.uniform(3)
    out = robust_bounds(spec, np.zeros(3), 0.025)
    np.testing.assert_array_equal(out.upper_eff, spec.v_upper)
    np.testing.assert_array_equal(out.lower_eff, spec.v_lower)


def test_robust_bounds_five_percent_regime():
    out = robust_bounds(ConstraintSpec.uniform(2, 0.95, 1.05), [1.125e-5, 0.5e-5], 0.025)
    np.testing.assert_allclose(out.upper_eff, 1.035, atol=1e-12)
    np.testing.assert_allclose(out.lower_eff, 0.965, atol=1e-12)
    np.testing.assert_array_equal(out.v_upper, 1.05)


def test_robust_bounds_infeasible_tightening():
    with pytest.raises(InfeasibleTighteningError):
        robust_bounds(ConstraintSpec.uniform(1, 0.95, 1.05), [1e-2], 0.025)


@pytest.mark.parametrize("dist", ["normal", "uniform", "laplace"])
def test_robust_bounds_monte_carlo_violation(dist):
    rng = np.random.default_rng(4)
    var = 1.125e-5
    spec = robust_bounds(ConstraintSpec.uniform(1, 0.95, 1.05), [var], 0.025)
    sd = np.sqrt(var)
    noise = {
        "normal": lambda n: rng.normal(0, sd, n),
        "uniform": lambda n: rng.uniform(-np.sqrt(3) * sd, np.sqrt(3) * sd, n),
        "laplace": lambda n: rng.laplace(0, sd / np.sqrt(2), n),
    }[dist](10_000)
    for mean, side in ((spec.upper_eff[0], "up"), (spec.lower_eff[0], "low")):
        v = mean + noise
        freq = np.mean(v > 1.05) if side == "up" else np.mean(v < 0.95)
        assert freq <= 0.025


def test_robust_bounds_skewed_deviation_exceeds_symmetric_cap_but_not_cantelli():
    var, cap = 1.125e-5, 0.025
    spec = robust_bounds(ConstraintSpec.uniform(1, 0.95, 1.05), [var], cap)
    delta = 1.05 - spec.upper_eff[0]
    q = 0.04  # upward jump (1 - q) s exceeds delta with probability q
    s = np.sqrt(var / (q * (1 - q)))
    assert (1 - q) * s > delta
    assert cap < q <= var / (var + delta**2) < 2 * cap


# Trace constants


def _static_engine(ticks, plant="linear"):
    feeder = four_node_feeder()
    loads = -np.array([0.06, 0.05, 0.04, 0.04])
    tl = ScenarioTimeline(np.tile(loads, (ticks, 1)), np.zeros((ticks, 4)), np.full((ticks, 4), 450.0),
                          np.full(ticks, 80.0), 60.0)
    cfg = OnlineConfig(1000.0, window=1, plant=plant, reference=True)
    return OnlineEngine(linearize(feeder), ConstraintSpec.uniform(4, 0.95, 1.02), pv_devices(2), tl, cfg, 0, feeder)


def test_frozen_linear_trace_has_zero_drift_and_residual():
    eng = _static_engine(40)
    eng.run(30)
    ref = eng.trace.reference_arrays()
    tc = estimate_trace_constants(ref)
    assert tc.e < 1e-12
    assert tc.rho == 0.0
    assert tc.Delta == 0.0
    pop = eng.pop
    L = sigma_g_population(eng.spec, eng.model, pop, eng.S) ** 2 / sigma_c_population(pop, eng.S)
    assert tc.sigma_h <= L


def test_ac_plant_trace_reports_residual():
    eng = _static_engine(20, plant="ac")
    eng.run(10)
    assert estimate_trace_constants(eng.trace.reference_arrays()).rho > 0


def test_trace_too_short():
    with pytest.raises(DercoordError):
        estimate_trace_constants({"mu_star": np.zeros((1, 2, 8))})


def test_shifted_drift_measures_against_shifted_optimum():
    blocks = np.array([[[1.0], [2.0]], [[2.0], [2.0]], [[2.0], [3.0]]])
    trace = {
        "mu_star": blocks, "mu": blocks, "grad": -blocks, "grad_star": -blocks,
        "g_meas": np.zeros((3, 1)), "g_pred": np.zeros((3, 1)), "var_g": np.zeros(3),
    }
    assert estimate_trace_constants(trace, shift_slots=2).e == 1.0
    assert estimate_trace_constants(trace).e == 1.0
    # a pure shift has no drift in shifted coordinates
    trace["mu_star"] = np.array([[[1.0], [2.0]], [[2.0], [2.0]], [[2.0], [2.0]]])
    assert estimate_trace_constants(trace, shift_slots=2).e == 0.0


def test_dual_gradient_lipschitz_bound():
    model = linearize(four_node_feeder())
    spec = ConstraintSpec.uniform(4, 0.95, 1.02)
    devs = pv_devices(1) + [battery("b3", 3), battery("b4", 4)]
    prob = WindowProblem(model, spec, devs, -np.array([[0.06, 0.05, 0.04, 0.04]]))
    phi = 1e-3
    L = sigma_g_population(spec, model, prob.population, 1) ** 2 / sigma_c_population(prob.population, 1) + phi
    rng = np.random.default_rng(5)
    mus = [rng.uniform(0, 5000, (1, 8)) for _ in range(8)]
    grads = [prob.dual_gradient(m, phi) for m in mus]
    ratio = lipschitz_ratio(mus[:4], grads[:4], mus[4:], grads[4:])
    assert 0 < ratio <= L


def test_bound_report_flags():
    rep = BoundReport(2.0, 1.0, online_asymptote=1.0, measured_online=1.1)
    assert rep.passes == {"online": True, "stepsize": True}
    rep = BoundReport(2.0, 3.0, offline_asymptote=1.0, measured_offline=1.3)
    assert not rep.passes["offline"] and not rep.passes["stepsize"] and not rep.ok
    assert rep.to_dict()["epsilon"] == 3.0

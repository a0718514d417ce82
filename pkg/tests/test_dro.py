import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from riskflow.dro import (AffineModel, AmbiguityBlock, AmbiguitySpec, DroError, HingePayoff, LinearCoefficientModel,
                          RobustEvaluator, ScenarioPotentialModel, benders_exchange, calibrate_radius,
                          pairwise_distances, regime_weighted_value, solve_dro_affine,
                          solve_joint_frequency_robust, solve_regime_scenario_A, solve_regime_scenario_B,
                          split_confidence, worst_case_expectation_discrete, worst_frequencies)
from riskflow.equilibrium import solve_approach_B
from riskflow.kernel import project_simplex
from riskflow.risk import RiskProfile
from riskflow.scenarios import linear_scenarios

from conftest import random_linear_instance
from oracles import materialized_dro, transport_lp

THETA = 0.15


def _profile(alpha, lam):
    return RiskProfile(alpha, lam, THETA)


# radius calibration --------------------------------------------------------

def test_calibrate_radius_example():
    rho = calibrate_radius(100, 0.05, 3, 1.5, 2.0, 1.0)
    assert rho == pytest.approx((np.log(40.0) / 100.0) ** (1 / 3), rel=1e-14)
    assert rho == pytest.approx(0.3329, abs=1e-4)


def test_calibrate_radius_monotone_and_branches():
    rhos = [calibrate_radius(n, 0.05, 3, 1.5, 2.0, 1.0) for n in range(4, 400, 7)]
    assert np.all(np.diff(rhos) < 0)
    # ln(40) ~ 3.69: N = 3 takes the small-sample exponent 1/nu
    assert calibrate_radius(3, 0.05, 3, 1.5, 2.0, 1.0) == pytest.approx((np.log(40.0) / 3) ** (1 / 1.5))
    assert calibrate_radius(4, 0.05, 1, 1.5, 2.0, 1.0) == pytest.approx((np.log(40.0) / 4) ** 0.5)


@pytest.mark.parametrize("args", [(0, 0.05, 3, 1.5, 2, 1), (10, 1.0, 3, 1.5, 2, 1), (10, 0.05, 3, 1.0, 2, 1),
                                  (10, 0.05, 2, 1.5, 2, 1), (10, 0.05, 3, 1.5, 0, 1), (10, 0.9, 3, 1.5, 0.5, 1)])
def test_calibrate_radius_rejects(args):
    with pytest.raises(DroError):
        calibrate_radius(*args)


def test_split_confidence():
    parts = split_confidence(0.05, {"NR": 80, "HR": 15, "FL": 5})
    assert sum(parts.values()) == pytest.approx(0.05) and parts["NR"] == pytest.approx(0.04)


# discrete worst case ----------------------------------------------------------

@st.composite
def transport_instances(draw):
    rng = np.random.default_rng(draw(st.integers(0, 10**6)))
    m = int(rng.integers(1, 4))
    M = int(rng.integers(1, 6))
    N = int(rng.integers(1, 5))
    cand = rng.normal(0, 3, (M, m))
    samples = cand[rng.integers(0, M, N)] + (rng.normal(0, 1, (N, m)) if draw(st.booleans()) else 0.0)
    w = rng.dirichlet(np.ones(N))
    payoff = rng.normal(0, 10, M)
    rmin = float(w @ pairwise_distances(samples, cand).min(axis=1))
    rho = rmin + float(rng.exponential(2.0))
    return payoff, samples, cand, rho, w


@given(transport_instances())
def test_worst_case_matches_transport_lp(inst):
    payoff, samples, cand, rho, w = inst
    wc = worst_case_expectation_discrete(payoff, samples, cand, rho, w)
    ref, _ = transport_lp(payoff, samples, cand, rho, w)
    assert wc.value == pytest.approx(ref, rel=1e-7, abs=1e-7)


@given(transport_instances())
def test_worst_case_plan_feasible(inst):
    payoff, samples, cand, rho, w = inst
    wc = worst_case_expectation_discrete(payoff, samples, cand, rho, w)
    D = pairwise_distances(samples, cand)
    assert np.all(wc.plan >= -1e-12)
    assert np.allclose(wc.plan.sum(axis=1), w, atol=1e-8)
    assert float((wc.plan * D).sum()) <= rho + 1e-8
    assert float(wc.marginal @ payoff) == pytest.approx(wc.value, rel=1e-8, abs=1e-8)


def test_worst_case_collapse_and_saturation():
    cand = np.array([[0.0], [1.0], [4.0]])
    payoff = np.array([1.0, 5.0, 2.0])
    w = np.array([0.5, 0.3, 0.2])
    assert worst_case_expectation_discrete(payoff, cand, cand, 0.0, w).value == pytest.approx(w @ payoff)
    rho = pairwise_distances(cand, cand).max()
    assert worst_case_expectation_discrete(payoff, cand, cand, rho, w).value == pytest.approx(5.0)


def test_worst_case_errors():
    with pytest.raises(DroError):
        worst_case_expectation_discrete([], [[0.0]], np.zeros((0, 1)), 1.0)
    with pytest.raises(DroError):
        worst_case_expectation_discrete([1.0], [[0.0]], [[1.0]], -1.0)
    with pytest.raises(DroError):
        worst_case_expectation_discrete([1.0], [[0.0]], [[1.0]], 0.5)


def test_hinge_payoff():
    g = HingePayoff(0.5, 0.9, 10.0)
    assert np.allclose(g([8.0, 12.0]), [4.0, 6.0 + 5.0 * 2.0])


@given(st.integers(0, 10**6), st.floats(0.0, 2.0))
def test_worst_frequencies_match_lp(seed, eps):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    p_hat = rng.dirichlet(np.ones(n))
    v = rng.normal(0, 5, n)
    p = worst_frequencies(p_hat, v, eps)
    # variables (p, d) with d >= |p - p_hat|
    c = np.concatenate([-v, np.zeros(n)])
    A_ub = np.block([[np.eye(n), -np.eye(n)], [-np.eye(n), -np.eye(n)], [np.zeros((1, n)), np.ones((1, n))]])
    b_ub = np.concatenate([p_hat, -p_hat, [eps]])
    A_eq = np.concatenate([np.ones(n), np.zeros(n)])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=(0, None), method="highs")
    # HiGHS works to a 1e-7 primal feasibility tolerance
    assert p @ v == pytest.approx(-res.fun, abs=1e-6 * (1 + np.abs(v).max()))
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0) and np.abs(p - p_hat).sum() <= eps + 1e-12


# Benders exchange -----------------------------------------------------------------

def _random_dro_instance(seed):
    rng = np.random.default_rng(seed)
    net, scen = random_linear_instance(rng)
    N = int(rng.integers(1, 6))
    samples = scen.xi[rng.integers(0, scen.n_scenarios, N)] + rng.normal(0, 0.5, (N, scen.xi.shape[1]))
    w = np.full(N, 1.0 / N)
    rho = float(w @ pairwise_distances(samples, scen.xi).min(axis=1)) + float(rng.uniform(0, 5))
    alpha = float(rng.uniform(0.5, 0.95))
    prof = _profile(alpha, float(rng.uniform(0, alpha)))
    return net, scen, samples, w, rho, prof


@pytest.mark.parametrize("seed", range(10))
def test_benders_matches_materialized_solve(seed):
    net, scen, samples, w, rho, prof = _random_dro_instance(seed)
    res = benders_exchange(net, AmbiguitySpec.stationary(scen, rho, samples, w), prof)
    assert res.converged and res.relative_gap <= 1e-6
    value, f, _ = materialized_dro(net, scen, samples, w, rho, prof)
    assert res.upper_bound == pytest.approx(value, rel=1e-5)
    # the oracle's flows, priced exactly, cannot beat the exchange optimum
    ev = RobustEvaluator(net, AmbiguitySpec.stationary(scen, rho, samples, w), prof)
    assert ev.evaluate(f).value >= res.lower_bound - 1e-9 * abs(value)
    lbs = [r["lb"] for r in res.trace]
    ubs = [r["ub"] for r in res.trace]
    assert np.all(np.diff(lbs) >= -1e-12 * (1 + abs(ubs[-1])))
    assert np.all(np.diff(ubs) <= 1e-12 * (1 + abs(ubs[-1])))


@pytest.mark.parametrize("seed", range(5))
def test_reported_bound_is_certified_by_exact_evaluator(seed):
    net, scen, samples, w, rho, prof = _random_dro_instance(100 + seed)
    res = benders_exchange(net, AmbiguitySpec.stationary(scen, rho, samples, w), prof)
    ev = RobustEvaluator(net, AmbiguitySpec.stationary(scen, rho, samples, w), prof)
    exact = ev.evaluate(res.solution.path_flows).value
    assert exact == pytest.approx(res.upper_bound, rel=1e-12)
    assert res.lower_bound <= res.upper_bound + 1e-9
    assert res.solution.objective == pytest.approx(exact, rel=1e-12)
    for sl, q in zip(net.od_slices, net.demands):
        assert res.solution.path_flows[sl].sum() == pytest.approx(q, rel=1e-8)


def test_rho_zero_equals_sp(toy_net, toy_scen):
    for alpha, lam in [(0.9, 0.2), (0.95, 0.0), (0.9, 0.8)]:
        prof = _profile(alpha, lam)
        dro = benders_exchange(toy_net, AmbiguitySpec.stationary(toy_scen, 0.0), prof)
        sp = solve_approach_B(toy_net, toy_scen, prof)
        assert dro.upper_bound == pytest.approx(sp.objective, rel=1e-5)


def test_objective_monotone_in_radius_and_above_sp(toy_net, toy_scen):
    prof = _profile(0.9, 0.2)
    sp = solve_approach_B(toy_net, toy_scen, prof).objective
    vals = [benders_exchange(toy_net, AmbiguitySpec.stationary(toy_scen, r), prof).upper_bound
            for r in (0.0, 0.8, 1.6, 3.2, 6.4)]
    assert np.all(np.diff(vals) >= -1e-6 * abs(vals[0]))
    assert all(v >= sp - 1e-6 * abs(sp) for v in vals)


@pytest.mark.parametrize("alpha,lam", [(0.9, 0.2), (0.9, 0.6), (0.95, 0.2), (0.95, 0.8)])
def test_toy_stationary_dro_avoids_path_one(toy_net, toy_scen, alpha, lam):
    res = benders_exchange(toy_net, AmbiguitySpec.stationary(toy_scen, 3.2), _profile(alpha, lam))
    p1, p2, p3 = res.solution.probabilities
    assert res.converged and p1 == 0.0 and p3 > p2


@given(st.integers(0, 10**6))
def test_entropy_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    net, scen, samples, w, rho, prof = _random_dro_instance(seed)
    ev = RobustEvaluator(net, AmbiguitySpec.stationary(scen, rho, samples, w), prof)
    f = project_simplex(rng.uniform(0, 1, net.n_paths), float(net.demands[0]))
    inside, outside = ev.evaluate(f, True), ev.evaluate(f)
    assert inside.value == pytest.approx(outside.value, rel=1e-10, abs=1e-10)


def test_warm_start_reaches_same_value(toy_net, toy_scen):
    prof = _profile(0.9, 0.4)
    spec = AmbiguitySpec.stationary(toy_scen, 3.2)
    cold = benders_exchange(toy_net, spec, prof)
    warm = benders_exchange(toy_net, spec, prof, x0=cold.solution.path_flows)
    assert warm.upper_bound == pytest.approx(cold.upper_bound, rel=1e-6)


def test_iteration_cap_is_reported(grid_net, grid_scen):
    res = benders_exchange(grid_net, AmbiguitySpec.stationary(grid_scen, 1.0), RiskProfile(0.4, 0.2, 0.05),
                           max_iter=2, polish=False)
    assert not res.converged and res.iterations == 2 and res.lower_bound <= res.upper_bound


def test_bad_configuration():
    net, scen, samples, w, rho, prof = _random_dro_instance(3)
    with pytest.raises(DroError):
        benders_exchange(net, AmbiguitySpec.stationary(scen, rho, samples, w), prof, eps_gap=0.0)
    far = samples + 100.0
    with pytest.raises(DroError):
        RobustEvaluator(net, AmbiguitySpec.stationary(scen, 0.1, far, w), prof)
    with pytest.raises(DroError):
        AmbiguitySpec.stationary(scen, -1.0)


# affine support ----------------------------------------------------------------

def _affine_setup(toy_net):
    base = np.array([10, 0.5, 15, 0.5, 20, 0.5], float)
    model = LinearCoefficientModel(toy_net, base, uncertain=[0])
    samples = (10.0 + np.random.default_rng(0).gamma(2.0, 2.0, size=4))[:, None]
    return model, samples


@pytest.mark.parametrize("rho", [0.5, 2.0])
@pytest.mark.parametrize("alpha,lam", [(0.9, 0.2), (0.7, 0.0)])
def test_affine_matches_dense_grid_benders(toy_net, rho, alpha, lam):
    model, samples = _affine_setup(toy_net)
    prof = _profile(alpha, lam)
    aff = solve_dro_affine(toy_net, model, samples, rho, prof)
    n = samples.shape[0]
    shifts = np.concatenate([[0.0], np.geomspace(0.05, 1.0, 8) * rho * n * 4])
    grid = np.unique(np.concatenate([samples[:, 0] + s for s in shifts]))
    cands = linear_scenarios(np.array([model.full_coefficients([g]) for g in grid]), np.full(grid.size, 1 / grid.size))
    sample_rows = np.array([model.full_coefficients(x) for x in samples])
    ben = benders_exchange(toy_net, AmbiguitySpec.stationary(cands, rho, sample_rows, np.full(n, 1 / n)), prof)
    assert aff.objective == pytest.approx(ben.upper_bound, rel=2e-4)


def test_affine_rho_zero_is_sp(toy_net):
    model, samples = _affine_setup(toy_net)
    prof = _profile(0.9, 0.2)
    aff = solve_dro_affine(toy_net, model, samples, 0.0, prof)
    rows = np.array([model.full_coefficients(x) for x in samples])
    sp = solve_approach_B(toy_net, linear_scenarios(rows, np.full(len(rows), 1 / len(rows))), prof)
    assert aff.objective == pytest.approx(sp.objective, rel=1e-5)
    assert np.abs(aff.path_flows - sp.path_flows).max() <= 1e-5


def test_affine_without_uncertain_load_ignores_radius(toy_net):
    # no uncertain coefficient: h(f) is empty, so the radius cannot matter
    base = np.array([10, 0.5, 15, 0.5, 20, 0.5], float)
    model = LinearCoefficientModel(toy_net, base, uncertain=[])
    prof = _profile(0.9, 0.2)
    a = solve_dro_affine(toy_net, model, np.zeros((3, 0)), 0.0, prof)
    b = solve_dro_affine(toy_net, model, np.zeros((3, 0)), 5.0, prof)
    assert a.objective == pytest.approx(b.objective, rel=1e-12)


def test_non_affine_rejected(toy_net):
    prof = _profile(0.9, 0.2)
    samples = np.ones((3, 1))

    def bpr_like(xi):
        return [{"t0": float(xi[0]) ** 2, "alpha": 0.15, "beta": 4.0, "capacity": 5.0}] * 3

    with pytest.raises(DroError):
        solve_dro_affine(toy_net, ScenarioPotentialModel(toy_net, bpr_like), samples, 1.0, prof)

    class Curved(LinearCoefficientModel):
        def value(self, f, xi):
            return super().value(f, xi) + float(np.sum(np.asarray(xi) ** 2))

    with pytest.raises(DroError):
        solve_dro_affine(toy_net, Curved(toy_net, uncertain=[0]), samples, 1.0, prof)
    assert isinstance(Curved(toy_net), AffineModel)


# regime-structured variants ---------------------------------------------------------

def test_scenario_A_degenerate_structure_equals_stationary(toy_net, toy_scen):
    uniform = toy_scen.reweighted(np.full(3, 1 / 3))
    spec = AmbiguitySpec.regimes({"a": uniform, "b": uniform}, {"a": 2.0, "b": 2.0}, {"a": 0.3, "b": 0.7})
    prof = _profile(0.9, 0.2)
    regA = solve_regime_scenario_A(toy_net, spec, prof)
    stat = benders_exchange(toy_net, AmbiguitySpec.stationary(uniform, 2.0, uniform.xi, np.full(3, 1 / 3)), prof)
    assert regA.upper_bound == pytest.approx(stat.upper_bound, rel=1e-6)


def test_scenario_A_toy_close_to_sp(toy_net, toy_scen, regime_spec):
    for alpha, lam in [(0.9, 0.2), (0.9, 0.8), (0.95, 0.2), (0.95, 0.8)]:
        prof = _profile(alpha, lam)
        res = solve_regime_scenario_A(toy_net, regime_spec, prof)
        sp = solve_approach_B(toy_net, toy_scen, prof)
        assert res.converged
        assert np.abs(res.solution.probabilities - sp.probabilities).max() <= 0.05


@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_regime_separability_identity(regime_spec_cached, seed, u):
    net, spec = regime_spec_cached
    rng = np.random.default_rng(seed)
    prof = _profile(0.9, 0.3)
    ev = RobustEvaluator(net, spec, prof)
    f = project_simplex(rng.uniform(0, 1, net.n_paths), float(net.demands[0]))
    z = ev.potentials(f)
    t = float(z.min() + u * (z.max() - z.min()))
    joint = ev.value_at(z, t)[0]
    parts = 0.0
    for pw, blk in zip(spec.frequencies, spec.blocks):
        zb = blk.candidates.costs.potentials(net.incidence @ f)
        g = HingePayoff(prof.lam_bar, prof.alpha, t)(zb)
        parts += pw * worst_case_expectation_discrete(g, blk.samples, blk.candidates.xi, blk.radius,
                                                      blk.weights).value
    assert joint == pytest.approx(prof.lam_bar * t + parts, rel=1e-8)


@pytest.fixture(scope="module")
def regime_spec_cached(toy_net, regime_spec):
    return toy_net, regime_spec


def test_scenario_B_toy_regimes(toy_net, regime_spec):
    for alpha, lam in [(0.9, 0.2), (0.95, 0.8)]:
        res = solve_regime_scenario_B(toy_net, regime_spec, _profile(alpha, lam))
        assert not res.failures
        fl = res.per_regime["FL"].solution.probabilities
        nr = res.per_regime["NR"].solution.probabilities
        assert fl[0] == 0.0 and np.argmax(fl) == 2
        assert nr[0] > nr[1] > nr[2]
        flows = {w: r.solution.path_flows for w, r in res.per_regime.items()}
        assert res.objective == pytest.approx(regime_weighted_value(toy_net, regime_spec, _profile(alpha, lam),
                                                                    flows), rel=1e-8)


def test_scenario_B_identical_regimes_and_threads(toy_net, toy_scen):
    uniform = toy_scen.reweighted(np.full(3, 1 / 3))
    spec = AmbiguitySpec.regimes({"a": uniform, "b": uniform, "c": uniform}, {"a": 1.0, "b": 1.0, "c": 1.0},
                                 {"a": 0.2, "b": 0.3, "c": 0.5})
    prof = _profile(0.9, 0.2)
    serial = solve_regime_scenario_B(toy_net, spec, prof)
    threaded = solve_regime_scenario_B(toy_net, spec, prof, threads=3)
    ref = serial.per_regime["a"].solution.path_flows
    for w in "abc":
        assert np.array_equal(serial.per_regime[w].solution.path_flows, ref)
        assert np.array_equal(threaded.per_regime[w].solution.path_flows, ref)
    assert threaded.objective == serial.objective


def test_scenario_B_isolates_failures(toy_net, toy_scen):
    uniform = toy_scen.reweighted(np.full(3, 1 / 3))
    prof = _profile(0.9, 0.2)
    good = AmbiguityBlock("ok", uniform.xi, np.full(3, 1 / 3), 1.0, uniform)
    # samples far from every candidate with a tiny radius: the ball holds no law on the support
    bad = AmbiguityBlock("bad", uniform.xi + 50.0, np.full(3, 1 / 3), 0.1, uniform)
    res = solve_regime_scenario_B(toy_net, AmbiguitySpec((good, bad), np.array([0.5, 0.5])), prof)
    assert set(res.failures) == {"bad"} and "radius" in res.failures["bad"]
    assert res.per_regime["ok"].converged and np.isnan(res.objective)


def test_joint_zero_budget_is_scenario_A(toy_net, regime_spec):
    prof = _profile(0.9, 0.2)
    a = solve_regime_scenario_A(toy_net, regime_spec, prof)
    j = solve_joint_frequency_robust(toy_net, regime_spec, 0.0, prof)
    assert j.upper_bound == pytest.approx(a.upper_bound, rel=1e-8)


def test_joint_saturated_budget_matches_worst_regime(toy_net, regime_spec):
    prof = _profile(0.9, 0.2)
    j = solve_joint_frequency_robust(toy_net, regime_spec, 2.0, prof)
    fl = benders_exchange(toy_net, regime_spec.single_block(regime_spec.labels.index("FL")), prof)
    assert np.allclose(j.frequencies, [0.0, 0.0, 1.0])
    assert j.upper_bound == pytest.approx(fl.upper_bound, rel=1e-6)


@pytest.mark.parametrize("alpha,lam", [(0.9, 0.2), (0.9, 0.8), (0.95, 0.2), (0.95, 0.8)])
def test_joint_costs_exceed_stationary(toy_net, toy_scen, regime_spec, alpha, lam):
    prof = _profile(alpha, lam)
    j = solve_joint_frequency_robust(toy_net, regime_spec, 0.04, prof)
    st_ = benders_exchange(toy_net, AmbiguitySpec.stationary(toy_scen, 3.2), prof)
    assert j.converged
    assert np.all(j.solution.costs > st_.solution.costs)
    assert j.solution.probabilities[2] > j.solution.probabilities[1]
    assert np.abs(j.frequencies - regime_spec.frequencies).sum() <= 0.04 + 1e-12


def test_joint_rejects_negative_budget(toy_net, regime_spec):
    with pytest.raises(DroError):
        solve_joint_frequency_robust(toy_net, regime_spec, -0.1, _profile(0.9, 0.2))

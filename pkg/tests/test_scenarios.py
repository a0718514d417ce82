import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from riskflow.network import network_from_dict
from riskflow.scenarios import (DESIGN_SPEED_MS, MPH_TO_MS, SEVERITY_LABELS, RegimePerturbationSpec, ScenarioError,
                                ScenarioSet, SeverityLevel, baseline_scenarios, beckmann_potential,
                                build_joint_scenarios, cluster_severities, compile_costs, link_integral, link_time,
                                linear_scenarios, marginal_path_times, perturb_depths, read_severity_csv,
                                safe_speed, sample_regime_perturbations, scenarios_from_dict, scenarios_to_list,
                                stopping_distance, write_severity_csv)

from conftest import DATA

BPR = {"t0": 2.0, "alpha": 0.15, "beta": 4.0, "capacity": 3800.0, "delay": 0.0}


def test_link_time_examples():
    assert link_time(BPR, 0.0) == 2.0
    assert link_time(BPR, 3800.0) == pytest.approx(2.3, abs=1e-12)
    assert link_time({"intercept": 5.0, "slope": 0.2}, 10.0) == pytest.approx(7.0)
    with pytest.raises(ScenarioError):
        link_time(BPR, -1.0)


def test_linear_potential_example():
    net = network_from_dict({"nodes": ["o", "d"], "links": [{"id": "e", "from": "o", "to": "d", "model": "linear"}],
                             "od": [{"origin": "o", "destination": "d", "demand": 10.0}]})
    costs = compile_costs([[{"intercept": 5.0, "slope": 0.2}]], 1)
    assert beckmann_potential([10.0], net, costs, 0) == pytest.approx(60.0)
    assert beckmann_potential([0.0], net, costs, 0) == 0.0


@pytest.mark.parametrize("x", [0.0, 500.0, 3800.0, 9000.0])
def test_bpr_integral_matches_quadrature(x):
    params = dict(BPR, delay=0.7, beta=5.0)
    closed = link_integral(params, x)
    numeric, _ = quad(lambda w: link_time(params, w), 0.0, x, epsabs=0, epsrel=1e-13)
    assert closed == pytest.approx(numeric, rel=1e-8, abs=1e-12)


def test_compiled_table_agrees_with_scalar_functions(grid_net, grid_scen):
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 6000, grid_net.n_links)
    t = grid_scen.costs.times(x)
    z = grid_scen.costs.potentials(x)
    for s, row in enumerate(grid_scen.params):
        assert t[s] == pytest.approx([link_time(p, xa) for p, xa in zip(row, x)], rel=1e-12)
        assert z[s] == pytest.approx(sum(link_integral(p, xa) for p, xa in zip(row, x)), rel=1e-12)


def test_marginal_times_are_potential_gradient(grid_net, grid_scen):
    rng = np.random.default_rng(0)
    f = rng.uniform(200, 1500, grid_net.n_paths)
    tau = marginal_path_times(f, grid_net, grid_scen.costs)
    h = 1e-4
    for k in range(grid_net.n_paths):
        e = np.zeros(grid_net.n_paths)
        e[k] = h
        fd = (beckmann_potential(f + e, grid_net, grid_scen.costs)
              - beckmann_potential(f - e, grid_net, grid_scen.costs)) / (2 * h)
        assert np.allclose(fd, tau[:, k], rtol=1e-5)


def test_zero_flow_linear_times_are_intercepts(toy_net, toy_scen):
    tau = marginal_path_times(np.zeros(3), toy_net, toy_scen.costs)
    assert np.array_equal(tau, toy_scen.xi[:, 0::2])


def test_disjoint_path_times_equal_link_times(toy_net, toy_scen):
    f = np.array([2.0, 3.0, 5.0])
    tau = marginal_path_times(f, toy_net, toy_scen.costs)
    assert np.allclose(tau, toy_scen.xi[:, 0::2] + toy_scen.xi[:, 1::2] * f)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_second_differences_nonnegative(grid_pair, s1, s2, seed):
    net, scen = grid_pair
    rng = np.random.default_rng(seed)
    fa = np.concatenate([q * rng.dirichlet(np.ones(sl.stop - sl.start)) for sl, q in zip(net.od_slices, net.demands)])
    fb = np.concatenate([q * rng.dirichlet(np.ones(sl.stop - sl.start)) for sl, q in zip(net.od_slices, net.demands)])
    h = 0.25 * min(s1, 1 - s1, 0.2) + 1e-3
    mid = min(max(s2, h), 1 - h)
    pts = [fa + (mid + d) * (fb - fa) for d in (-h, 0.0, h)]
    z = [beckmann_potential(p, net, scen.costs) for p in pts]
    second = z[0] - 2 * z[1] + z[2]
    assert np.all(second >= -1e-9 * (1 + np.abs(z[1])))
    mean = [scen.probs @ zz for zz in z]
    assert mean[0] - 2 * mean[1] + mean[2] >= -1e-9 * (1 + abs(mean[1]))


@pytest.fixture(scope="module")
def grid_pair(grid_net, grid_scen):
    return grid_net, grid_scen


@given(st.floats(0, 5000), st.floats(0, 5000))
def test_bpr_times_nondecreasing(a, b):
    lo, hi = sorted((a, b))
    assert link_time(BPR, lo) <= link_time(BPR, hi)


def test_invalid_params_rejected():
    with pytest.raises(ScenarioError):
        compile_costs([[dict(BPR, beta=0.5)]], 1)
    with pytest.raises(ScenarioError):
        compile_costs([[dict(BPR, capacity=0.0)]], 1)
    with pytest.raises(ScenarioError):
        compile_costs([[dict(BPR, delay=-1.0)]], 1)
    with pytest.raises(ScenarioError):
        ScenarioSet(("a", "b"), np.array([0.5, 0.6]), ((BPR,), (BPR,)))


def test_probabilities_sum_to_one(toy_scen):
    assert abs(toy_scen.probs.sum() - 1.0) <= 1e-12


def test_scenario_json_round_trip(toy_net, toy_scen):
    again = scenarios_from_dict({"scenarios": scenarios_to_list(toy_scen, toy_net)}, toy_net)
    assert np.array_equal(again.costs.lin, toy_scen.costs.lin)
    assert np.array_equal(again.costs.coef, toy_scen.costs.coef)
    assert again.regimes == toy_scen.regimes


def test_toy_instance_design(toy_scen):
    """Link 1 is best under NR and HR but worst under flooding."""
    a = toy_scen.xi[:, 0::2]
    nr, hr, fl = (toy_scen.labels.index(w) for w in ("NR", "HR", "FL"))
    assert np.argmin(a[nr]) == 0 and np.argmin(a[hr]) == 0 and np.argmax(a[fl]) == 0
    d = np.linalg.norm
    assert d(toy_scen.xi[nr] - toy_scen.xi[fl]) == pytest.approx(158.68, abs=0.01)


# safe speed and depth noise --------------------------------------------------

def test_safe_speed_recovers_design_speed():
    assert safe_speed(0.0) == pytest.approx(DESIGN_SPEED_MS, rel=1e-12)
    assert DESIGN_SPEED_MS == pytest.approx(30 * MPH_TO_MS, rel=1e-12)
    assert safe_speed(0.0, S=stopping_distance()) == pytest.approx(13.4112, abs=1e-9)


def test_safe_speed_strictly_decreasing():
    v = safe_speed(np.linspace(0.0, 300.0, 100))
    assert np.all(np.diff(v) < 0)


def test_safe_speed_closed_form():
    h = 40.0
    a = 9.81 * 0.55 * np.exp(-0.05 * h)
    S = stopping_distance()
    assert safe_speed(h) == pytest.approx(-a * 1.5 + np.sqrt(a * a * 2.25 + 2 * a * S), rel=1e-14)


def test_perturb_depths_rules():
    base = np.array([0.0, 10.0, 0.0, 200.0, 1.0])
    a = perturb_depths(base, seed=2025)
    b = perturb_depths(base, seed=2025)
    assert a.tobytes() == b.tobytes()
    assert a[0] == 0.0 and a[2] == 0.0
    assert np.all(a >= 0)
    # an extreme negative draw is clipped
    c = perturb_depths(np.full(5000, 0.5), seed=1)
    assert np.any(c == 0.0) and np.all(c >= 0)


def test_perturb_depths_draws_match_generator():
    rng = np.random.default_rng(7)
    m = rng.normal(1.0, 0.5, 3)
    add = rng.normal(5.0, 2.0, 3)
    d = np.array([10.0, 20.0, 30.0])
    assert np.allclose(perturb_depths(d, seed=7), np.maximum(0.0, d * m + add))


# clustering --------------------------------------------------------------------

def test_cluster_separated_blobs():
    rng = np.random.default_rng(11)
    centers = np.array([5.0, 10.0, 15.0, 20.0, 25.0])
    sizes = np.array([30, 50, 40, 60, 20])
    x = np.concatenate([c + rng.uniform(-0.5, 0.5, n) for c, n in zip(centers, sizes)])
    levels = cluster_severities(rng.permutation(x), 5, seed=2025)
    assert [lv.label for lv in levels] == list(SEVERITY_LABELS)
    for lv, c, n in zip(levels, centers, sizes):
        assert abs(lv.speed_mph - c) < 0.5
        assert lv.prob == pytest.approx(n / sizes.sum(), abs=1e-15)
    assert abs(sum(lv.prob for lv in levels) - 1.0) <= 1e-12


def test_cluster_single_level_and_errors():
    (lv,) = cluster_severities([1.0, 2.0, 3.0], 1)
    assert lv.speed_mph == pytest.approx(2.0) and lv.prob == 1.0
    with pytest.raises(ScenarioError):
        cluster_severities([1.0, 1.0, 2.0], 5)


@given(st.lists(st.floats(1.0, 30.0), min_size=20, max_size=60, unique=True), st.integers(1, 5))
def test_cluster_probabilities_normalized(samples, k):
    levels = cluster_severities(samples, k)
    assert abs(sum(lv.prob for lv in levels) - 1.0) <= 1e-12
    speeds = [lv.speed_mph for lv in levels]
    assert speeds == sorted(speeds)


# joint scenarios -----------------------------------------------------------------

def _levels(probs, speeds, lanes=2):
    return [SeverityLevel(lab, s, lanes, 0, p) for lab, s, p in zip(SEVERITY_LABELS, speeds, probs)]


def test_comonotone_identical_rows():
    net = network_from_dict({"nodes": ["a", "b", "c"],
                             "links": [{"id": "x", "from": "a", "to": "b"}, {"id": "y", "from": "b", "to": "c"}],
                             "od": [{"origin": "a", "destination": "c", "demand": 1.0}]})
    p = (0.1, 0.1, 0.2, 0.3, 0.3)  # slowest first
    table = {"x": _levels(p, (5, 10, 15, 20, 25)), "y": _levels(p, (6, 11, 16, 21, 26))}
    scen = build_joint_scenarios(net, table)
    assert np.allclose(scen.probs, (0.3, 0.3, 0.2, 0.1, 0.1))
    assert scen.labels[0] == "Minor"


def test_single_link_scenarios_are_its_rows():
    net = network_from_dict({"nodes": ["a", "b"], "links": [{"id": "x", "from": "a", "to": "b", "length_mi": 0.5}],
                             "od": [{"origin": "a", "destination": "b", "demand": 1.0}]})
    rows = _levels((0.1, 0.2, 0.3, 0.25, 0.15), (8, 12, 18, 24, 29), lanes=3)
    scen = build_joint_scenarios(net, {"x": rows})
    for s, lv in enumerate(reversed(rows)):
        assert scen.probs[s] == pytest.approx(lv.prob)
        assert scen.params[s][0]["t0"] == pytest.approx(30.0 / lv.speed_mph)
        assert scen.params[s][0]["capacity"] == 3 * 1900.0


def test_ragged_tables_rejected(toy_net):
    table = {"L1": _levels((0.5, 0.5), (5, 10)), "L2": _levels((1.0,), (5,)), "L3": _levels((0.5, 0.5), (5, 10))}
    with pytest.raises(ScenarioError):
        build_joint_scenarios(toy_net, table)


def test_table3_gives_five_scenarios(grid_scen):
    assert grid_scen.n_scenarios == 5
    assert abs(grid_scen.probs.sum() - 1.0) <= 1e-12


def test_severity_csv_round_trip(tmp_path):
    table = read_severity_csv(DATA / "grid_severity.csv")
    assert len(table) == 24 and all(len(v) == 5 for v in table.values())
    write_severity_csv(tmp_path / "s.csv", table)
    again = read_severity_csv(tmp_path / "s.csv")
    assert {k: [(l.label, l.lanes, l.speed_mph) for l in v] for k, v in again.items()} == \
        {k: [(l.label, l.lanes, round(l.speed_mph, 6)) for l in v] for k, v in table.items()}


def test_baseline_scenario(grid_net):
    scen = baseline_scenarios(grid_net)
    assert scen.n_scenarios == 1
    assert scen.params[0][0]["t0"] == pytest.approx(grid_net.links[0].free_flow_minutes)


# regime sampler ------------------------------------------------------------------

def _toy_rps(**kw):
    with open(DATA / "toy_regimes.json") as fh:
        d = json.load(fh)
    d.update(kw)
    return RegimePerturbationSpec.from_dict(d)


def test_regime_radii():
    _, radii = sample_regime_perturbations(_toy_rps())
    assert radii["NR"] == pytest.approx(3.2)
    assert radii["HR"] == pytest.approx(7.390, abs=5e-4)
    assert radii["FL"] == pytest.approx(20.239, abs=5e-4)


def test_regime_samples_nonnegative_and_counts():
    samples, _ = sample_regime_perturbations(_toy_rps())
    assert {w: len(s) for w, s in samples.items()} == {"NR": 80, "HR": 15, "FL": 2}
    assert all(np.all(s >= 0) for s in samples.values())


def test_regime_sample_means_large_n():
    rps = _toy_rps(counts={"NR": 8000, "HR": 15, "FL": 2})
    samples, _ = sample_regime_perturbations(rps)
    da = samples["NR"][:, 0::2]
    mean = np.array(rps.mean_a["NR"])
    se = mean / np.sqrt(2.0) / np.sqrt(8000)  # gamma sd = mean / sqrt(shape)
    assert np.all(np.abs(da.mean(axis=0) - mean) <= 3 * se)
    db = samples["NR"][:, 1::2]
    se_b = np.array(rps.mean_b["NR"]) / np.sqrt(3.0) / np.sqrt(8000)
    assert np.all(np.abs(db.mean(axis=0) - np.array(rps.mean_b["NR"])) <= 3 * se_b)


def test_regime_spec_validation():
    with pytest.raises(ScenarioError):
        _toy_rps(counts={"NR": 0, "HR": 15, "FL": 2})
    with pytest.raises(ScenarioError):
        _toy_rps(shape_a=0.0)


def test_linear_scenarios_shape():
    scen = linear_scenarios([[1, 0.1, 2, 0.2]], [1.0])
    assert scen.params[0][1] == {"intercept": 2.0, "slope": 0.2}
    with pytest.raises(ScenarioError):
        linear_scenarios([[1, 0.1, 2]], [1.0])

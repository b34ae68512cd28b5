import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storeforensics.errors import ConfigError, ConvergenceWarning, NotFoundError
from storeforensics.inference import (HealthBelief, HealthPosterior, MCMCConfig, build_graph,
                                      carry_forward, flag_unhealthy, infer, moment_match,
                                      path_availability)
from storeforensics.monitor import PathObservation
from storeforensics.topology import ComponentId, Kind, ProbePath, cid, enumerate_paths

from .oracles import availability_by_states, grid_posterior_means


def _healths(path, value=1.0):
    return {c: value for c in path.components}


def test_availability_all_healthy(minimal_topo):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    assert path_availability(path, _healths(path)) == 1.0


def test_availability_half_healthy_pair(minimal_topo):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    h = _healths(path)
    h[cid("DS1")] = h[cid("DS2")] = 0.5
    assert path_availability(path, h) == pytest.approx(0.75, abs=1e-12)


def test_availability_dead_target(minimal_topo):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    h = {c: 0.7 for c in path.components}
    h[cid("OSD1")] = 0.0
    assert path_availability(path, h) == 0.0


def test_availability_missing_health(minimal_topo):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    h = _healths(path)
    del h[cid("SN1")]
    with pytest.raises(NotFoundError):
        path_availability(path, h)


unit = st.floats(0.0, 1.0)


@settings(max_examples=200)
@given(st.data())
def test_availability_matches_state_enumeration(minimal_topo, data):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    h = {c: data.draw(unit) for c in path.components}
    got = path_availability(path, h)
    assert 0.0 <= got <= 1.0
    assert abs(got - availability_by_states(path, h)) <= 1e-12


@settings(max_examples=200)
@given(st.data())
def test_availability_symmetry_and_monotonicity(minimal_topo, data):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    h = {c: data.draw(unit) for c in path.components}
    swapped = dict(h)
    swapped[cid("DS1")], swapped[cid("DS2")] = h[cid("DS2")], h[cid("DS1")]
    assert path_availability(path, swapped) == pytest.approx(path_availability(path, h), abs=1e-15)
    c = data.draw(st.sampled_from(path.components))
    raised = dict(h)
    raised[c] = data.draw(st.floats(h[c], 1.0))
    assert path_availability(path, raised) >= path_availability(path, h) - 1e-15


def _figure_paths(minimal_topo):
    # two clients reaching two OSDs behind the same data-server pair
    from storeforensics.topology import TopologySpec, build_topology
    topo = build_topology(TopologySpec(clients=2, mds=1, data_servers=2, osds=2, lnets=4))
    return topo, [enumerate_paths(topo, "C1", "OSD1"), enumerate_paths(topo, "C2", "OSD2")]


def test_build_graph_two_paths(minimal_topo):
    topo, paths = _figure_paths(minimal_topo)
    graph = build_graph(None, [(p, 5, 5) for p in paths])
    names = {str(c) for c in graph.variables}
    assert {"C1", "C2", "CN1", "SN1", "DS1", "DS2", "OSD1", "OSD2"} <= names
    assert len(graph.factors) == 2
    assert not graph.unobserved


def test_build_graph_marks_unobserved(minimal_topo):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    graph = build_graph(minimal_topo, [(path, 5, 4)])
    assert cid("MDS1") in graph.unobserved
    assert cid("OSD1") not in graph.unobserved


def test_build_graph_priors_only(minimal_topo):
    graph = build_graph(minimal_topo, [])
    assert not graph.factors
    assert set(graph.unobserved) == set(minimal_topo.components)


def test_build_graph_duplicates_and_zero_n(minimal_topo, caplog):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    obs = PathObservation(cid("C1"), cid("OSD1"), 0, 5, 5)
    caplog.set_level("WARNING", logger="storeforensics")
    graph = build_graph(minimal_topo, [obs, obs, (path, 0, 0)])
    assert len(graph.factors) == 2
    assert "N=0" in caplog.text


def _single(n, y, alpha=1.0, beta=1.0):
    x = ComponentId(Kind.OSD, 1)
    path = ProbePath(x, x, (), ())
    return x, build_graph(None, [(path, n, y)], {x: HealthBelief(x, alpha, beta)})


@pytest.mark.parametrize("y, expected", [(60, 61 / 62), (0, 1 / 62)])
def test_conjugate_single_component(y, expected):
    x, graph = _single(60, y)
    post = infer(graph, MCMCConfig(seed=1))[x]
    assert abs(post.mean - expected) <= 0.01
    assert post.credible_low <= post.mean <= post.credible_high
    assert post.observed


def test_grid_oracle_agrees_with_conjugacy():
    x = "X"
    means = grid_posterior_means([x], {x: (2.0, 3.0)}, [((x,), (), 20, 14)], points=2001)
    assert means[x] == pytest.approx(16 / 25, abs=1e-4)


def test_serial_chain_matches_grid_oracle():
    comps = [ComponentId(Kind.CLIENT, 1), ComponentId(Kind.COMPUTE_NET, 1), ComponentId(Kind.OSD, 1)]
    path = ProbePath(comps[0], comps[2], tuple(comps[:2]), ())
    priors = {c: HealthBelief(c, 2.0, 1.0) for c in comps}
    post = infer(build_graph(None, [(path, 30, 15)], priors), MCMCConfig(seed=3))
    oracle = grid_posterior_means(comps, {c: (2.0, 1.0) for c in comps},
                                  [(tuple(comps), (), 30, 15)])
    for c in comps:
        assert abs(post[c].mean - oracle[c]) <= 0.02


def test_redundant_pair_matches_grid_oracle():
    a, b, t = cid("DS1"), cid("DS2"), cid("OSD1")
    c = cid("C1")
    path = ProbePath(c, t, (), ((a, b),))
    priors = {v: HealthBelief(v, 2.0, 1.0) for v in (a, b, t)}
    post = infer(build_graph(None, [(path, 20, 12)], priors), MCMCConfig(seed=5))
    oracle = grid_posterior_means([a, b, t], {v: (2.0, 1.0) for v in (a, b, t)},
                                  [((t,), ((a, b),), 20, 12)])
    for v in (a, b, t):
        assert abs(post[v].mean - oracle[v]) <= 0.02


def test_infer_deterministic(minimal_topo):
    path = enumerate_paths(minimal_topo, "C1", "OSD1")
    graph = build_graph(minimal_topo, [(path, 25, 20)])
    cfg = MCMCConfig(seed=42, samples=1000, burn_in=200)
    assert infer(graph, cfg) == infer(graph, cfg)


def test_unobserved_returns_prior(minimal_topo):
    prior = HealthBelief(cid("MDS1"), 3.0, 1.0)
    post = infer(build_graph(minimal_topo, [], {cid("MDS1"): prior}))
    p = post[cid("MDS1")]
    assert p.mean == 0.75 and (p.credible_low, p.credible_high) == (0.0, 1.0)
    assert not p.observed


def test_bimodal_graph_warns():
    # two symmetric explanations far apart: chains that settle in different modes disagree
    a, b = cid("DS1"), cid("DS2")
    c = cid("C1")
    p1 = ProbePath(c, a, (), ())
    p2 = ProbePath(c, b, (), ())
    joint = ProbePath(c, cid("OSD1"), (a, b), ())
    priors = {a: HealthBelief(a, 1.0, 1.0), b: HealthBelief(b, 1.0, 1.0)}
    obs = [(joint, 400, 200), (p1, 1, 1), (p2, 1, 1)]
    graph = build_graph(None, obs, {**priors, cid("OSD1"): HealthBelief(cid("OSD1"), 500.0, 0.01)})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        infer(graph, MCMCConfig(seed=0, chains=4, samples=1000, burn_in=0, rhat_max=1.0001))
    assert any(issubclass(w.category, ConvergenceWarning) for w in caught)


def test_mcmc_config_validation():
    with pytest.raises(ConfigError):
        MCMCConfig(samples=999)
    with pytest.raises(ConfigError):
        MCMCConfig(chains=0)


def test_moment_matching_examples():
    assert moment_match(0.5, 1 / 12) == pytest.approx((1.0, 1.0))
    a, b = moment_match(0.9, 0.005)
    assert a == pytest.approx(15.3) and b == pytest.approx(1.7)
    assert a / (a + b) == pytest.approx(0.9)
    assert a * b / ((a + b) ** 2 * (a + b + 1)) == pytest.approx(0.005)
    assert moment_match(0.5, 0.25) == (1.0, 1.0)
    assert moment_match(0.5, 0.3) == (1.0, 1.0)


def _post(name, mean, variance=0.001, high=None, observed=True):
    return HealthPosterior(cid(name), mean, variance, max(mean - 0.05, 0.0),
                           min(mean + 0.05, 1.0) if high is None else high, 1000,
                           observed=observed)


def test_carry_forward_dampens():
    c = cid("DS1")
    out = carry_forward({c: _post("DS1", 0.9, 0.005)})[c]
    assert out.alpha == pytest.approx(1 + 0.9 * 14.3)
    assert out.beta == pytest.approx(1 + 0.9 * 0.7)
    undamped = carry_forward({c: _post("DS1", 0.9, 0.005)}, damping=1.0)[c]
    assert undamped.alpha == pytest.approx(15.3)
    with pytest.raises(ConfigError):
        carry_forward({}, damping=1.5)


@given(st.floats(0.01, 0.99), st.floats(1e-5, 0.3), st.floats(0.0, 1.0))
def test_carry_forward_is_a_valid_beta(mean, variance, damping):
    c = cid("DS1")
    b = carry_forward({c: _post("DS1", mean, variance)}, damping)[c]
    assert b.alpha > 0 and b.beta > 0
    if variance < mean * (1 - mean) and damping == 1.0:
        assert b.mean == pytest.approx(mean, rel=1e-9)
        assert b.variance == pytest.approx(variance, rel=1e-6)
    if damping == 0.0:
        assert (b.alpha, b.beta) == (1.0, 1.0)


def test_flag_examples():
    healthy = {cid(f"DS{i}"): _post(f"DS{i}", 0.995) for i in range(1, 5)}
    assert flag_unhealthy(healthy) == set()
    sick = dict(healthy)
    sick[cid("DS3")] = _post("DS3", 0.3)
    assert flag_unhealthy(sick) == {cid("DS3")}
    sick[cid("DS4")] = _post("DS4", 0.2, observed=False)
    assert flag_unhealthy(sick) == {cid("DS3")}


def test_flag_rules_and_windows():
    wide = {cid("LNET1"): _post("LNET1", 0.72, high=0.97)}
    assert flag_unhealthy(wide, rule="mean") == {cid("LNET1")}
    assert flag_unhealthy(wide, rule="upper") == set()
    sick = {cid("DS1"): _post("DS1", 0.3)}
    ok = {cid("DS1"): _post("DS1", 0.99)}
    assert flag_unhealthy([ok, sick], min_windows=2) == set()
    assert flag_unhealthy([sick, sick], min_windows=2) == {cid("DS1")}
    assert flag_unhealthy([sick], min_windows=2) == set()
    for bad in ({"threshold_mean": 1.0}, {"min_windows": 0}, {"rule": "median"}):
        with pytest.raises(ConfigError):
            flag_unhealthy(sick, **bad)


def test_fail_stop_flags_ds17(ci_topo):
    from storeforensics.monitor import aggregate, plan_probes
    from storeforensics.simulator import FaultKind, FaultSpec, Scenario, run_scenario
    plan = plan_probes(ci_topo, ci_topo.clients)
    fault = FaultSpec(FaultKind.P1_FAIL_STOP, cid("DS17"), 0, 4)
    trace = run_scenario(Scenario("f", ci_topo, 5, (fault,)), plan, 0)
    graph = build_graph(ci_topo, aggregate(trace.probes, plan))
    post = infer(graph, MCMCConfig(seed=0))
    assert cid("DS17") in flag_unhealthy(post)
    assert post[cid("DS17")].mean < 0.2


def test_posterior_json_round_trip():
    p = _post("OSD4", 0.5)
    assert HealthPosterior.from_json(p.to_json()) == p
    assert math.isclose(HealthBelief(cid("DS1"), 2, 2).variance, 0.05)


def test_random_small_graph_against_oracle():
    rng = np.random.default_rng(0)
    comps = [cid("C1"), cid("DS1"), cid("DS2"), cid("OSD1")]
    path = ProbePath(comps[0], comps[3], (comps[0],), ((comps[1], comps[2]),))
    n = 20
    y = int(rng.integers(5, 20))
    priors = {c: HealthBelief(c, 1.5, 1.0) for c in comps}
    post = infer(build_graph(None, [(path, n, y)], priors), MCMCConfig(seed=2))
    oracle = grid_posterior_means(comps, {c: (1.5, 1.0) for c in comps},
                                  [((comps[0], comps[3]), ((comps[1], comps[2]),), n, y)])
    assert all(abs(post[c].mean - oracle[c]) <= 0.02 for c in comps)

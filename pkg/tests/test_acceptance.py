"""Acceptance criteria 1-8, each printing one PASS/FAIL line.

Criterion 2 runs a desk-scale proxy by default; set
``STOREFORENSICS_FULL_SCALE=1`` to add the PetaStore-shaped forty-fault run.
"""

import itertools
import math
import os
import string
import time
from dataclasses import replace

import numpy as np
import pytest

from storeforensics.config import PipelineConfig, ScenarioConfig
from storeforensics.diagnosis import LogTemplate, log_delta, lof, normalize
from storeforensics.harness import run_pipeline
from storeforensics.inference import HealthBelief, MCMCConfig, build_graph, infer, path_availability
from storeforensics.monitor import OpKind, aggregate, plan_probes
from storeforensics.simulator import FaultMix, Scenario, run_scenario
from storeforensics.topology import (ComponentId, Kind, ProbePath, TopologySpec, build_topology,
                                     check_identifiability, enumerate_paths)

from .oracles import availability_by_states, brute_identifiable, brute_lof, grid_posterior_means


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def _run_batch(cfg, seeds):
    return [run_pipeline(cfg.with_overrides(seed=s)).report for s in seeds]


@pytest.mark.slow
def test_criterion_1_two_fault_reproduction(report):
    start = time.perf_counter()
    reports = _run_batch(PipelineConfig(), range(200))
    elapsed = time.perf_counter() - start
    clean = sum(r.recall == 1.0 and r.false_positives == 0 for r in reports)
    in_scope = sum(r.true_positives + r.false_negatives for r in reports)
    ok = clean >= 0.98 * len(reports) and elapsed < 15 * 60
    report(1, ok, f"{clean}/200 scenarios with recall 1.0 and FP 0 (need >= 196); "
                  f"{in_scope} in-scope faults; {elapsed:.0f}s (limit 900s)")
    assert ok


@pytest.mark.slow
def test_criterion_2_forty_fault_stress(report):
    proxy_cfg = replace(PipelineConfig(), scenario=ScenarioConfig(mix=FaultMix(4, 4)))
    proxy = _run_batch(proxy_cfg, range(10))
    proxy_ok = all(r.recall == 1.0 and r.false_positives <= 1 for r in proxy)
    detail = (f"desk proxy (CI topology, 8 faults, 10 seeds): recall "
              f"{min(r.recall for r in proxy):.2f} min, FP max {max(r.false_positives for r in proxy)}")
    ok = proxy_ok
    if os.environ.get("STOREFORENSICS_FULL_SCALE") == "1":
        full_cfg = replace(PipelineConfig().with_overrides(scale="petastore"),
                           scenario=ScenarioConfig(mix=FaultMix(20, 20)))
        full = _run_batch(full_cfg, range(10))
        full_ok = all(r.recall == 1.0 and r.false_positives <= 4 for r in full)
        detail += (f"; PetaStore (40 faults, 10 seeds): recall {min(r.recall for r in full):.2f} "
                   f"min, FP max {max(r.false_positives for r in full)}")
        ok = ok and full_ok
    else:
        detail += "; PetaStore run skipped (set STOREFORENSICS_FULL_SCALE=1)"
    report(2, ok, detail)
    assert ok


def _random_graph(rng):
    """A random graph of at most four components with one to three paths."""
    size = int(rng.integers(1, 5))
    comps = [ComponentId(Kind.DATA_SERVER, i + 1) for i in range(size)]
    priors = {c: (float(rng.uniform(1, 4)), float(rng.uniform(1, 4))) for c in comps}
    factors, obs = [], []
    for _ in range(int(rng.integers(1, 4))):
        order = list(rng.permutation(size))
        pair = ()
        if size >= 3 and rng.random() < 0.5:
            pair = (comps[order.pop()], comps[order.pop()])
        serial = tuple(comps[i] for i in order[:max(1, int(rng.integers(1, len(order) + 1)))])
        n = int(rng.integers(5, 41))
        y = int(rng.integers(0, n + 1))
        groups = (pair,) if pair else ()
        factors.append((serial, groups, n, y))
        path = ProbePath(serial[0], serial[-1], serial[:-1], groups)
        obs.append((path, n, y))
    beliefs = {c: HealthBelief(c, *priors[c]) for c in comps}
    return comps, priors, factors, build_graph(None, obs, beliefs)


@pytest.mark.slow
def test_criterion_3_posterior_correctness(report):
    rng = np.random.default_rng(2024)
    conj_ok = 0
    worst = 0.0
    for i in range(100):
        a, b = rng.uniform(0.5, 5.0, 2)
        n = int(rng.integers(1, 120))
        y = int(rng.integers(0, n + 1))
        x = ComponentId(Kind.OSD, 1)
        graph = build_graph(None, [(ProbePath(x, x, (), ()), n, y)], {x: HealthBelief(x, a, b)})
        got = infer(graph, MCMCConfig(seed=i))[x].mean
        err = abs(got - (a + y) / (a + b + n))
        worst = max(worst, err)
        conj_ok += err <= 0.01
    grid_ok = 0
    for i in range(100):
        comps, priors, factors, graph = _random_graph(rng)
        post = infer(graph, MCMCConfig(seed=1000 + i))
        oracle = grid_posterior_means(comps, priors, factors)
        grid_ok += all(abs(post[c].mean - oracle[c]) <= 0.02 for c in comps)
    ok = conj_ok == 100 and grid_ok >= 95
    report(3, ok, f"conjugate {conj_ok}/100 within 0.01 (worst {worst:.4f}); "
                  f"grid oracle {grid_ok}/100 within 0.02 (need >= 95)")
    assert ok


def test_criterion_4_availability_formula(report):
    topo = build_topology(TopologySpec.ci())
    rng = np.random.default_rng(4)
    paths = [enumerate_paths(topo, c, t) for c in topo.clients[:2]
             for t in ("OSD1", "OSD2", "DS5", "MDS1")]
    exact = symmetric = monotone = 0
    for i in range(1000):
        path = paths[i % len(paths)]
        h = {c: float(rng.random()) for c in path.components}
        got = path_availability(path, h)
        direct = 1.0
        for c in path.serial_components:
            direct *= h[c]
        for g in path.redundancy_groups:
            direct *= 1.0 - math.prod(1.0 - h[c] for c in g)
        direct *= h[path.target]
        exact += abs(got - direct) <= 1e-12 and abs(got - availability_by_states(path, h)) <= 1e-12
        group = path.redundancy_groups[-1]
        swapped = dict(h)
        swapped[group[0]], swapped[group[-1]] = h[group[-1]], h[group[0]]
        symmetric += abs(path_availability(path, swapped) - got) <= 1e-12
        c = path.components[int(rng.integers(len(path.components)))]
        raised = dict(h)
        raised[c] = h[c] + (1.0 - h[c]) * float(rng.random())
        monotone += path_availability(path, raised) >= got - 1e-15
    osd = enumerate_paths(topo, "C1", "OSD1")
    h = {c: 1.0 for c in osd.components}
    ds1, ds2 = osd.redundancy_groups[-1]
    h[ds1], h[ds2], h[osd.target] = 0.3, 0.6, 0.8
    r_osd = (1 - (1 - 0.3) * (1 - 0.6)) * 0.8
    formula = abs(path_availability(osd, h) - r_osd) <= 1e-12
    ok = exact == symmetric == monotone == 1000 and formula
    report(4, ok, f"exact {exact}/1000, HA symmetry {symmetric}/1000, monotone {monotone}/1000, "
                  f"R_osd example {'matches' if formula else 'differs'}")
    assert ok


def test_criterion_5_probe_plan_arithmetic(report):
    topo = build_topology(TopologySpec.petastore())
    plan = plan_probes(topo, topo.clients)
    counts = plan.counts()
    trace = run_scenario(Scenario("plan", topo, 5), plan, 0)
    total_n = sum(o.n for o in aggregate(trace.probes, plan))
    got = (counts[OpKind.CRWR], counts[OpKind.RMEX], counts[OpKind.WREX], total_n)
    ok = got == (72, 72, 5184, 26640)
    report(5, ok, f"CrWr {got[0]}, RmEx {got[1]}, WrEx {got[2]} per epoch; "
                  f"sum of N over 5 epochs {got[3]}")
    assert ok


def test_criterion_6_lof_oracle(report):
    rng = np.random.default_rng(6)
    agree = 0
    for i in range(500):
        k = (3, 5, 10)[i % 3]
        n = int(rng.integers(max(10, k + 1), 101))
        dim = int(rng.integers(1, 4))
        pts = rng.normal(size=(n, dim))
        if i % 4 == 0:
            pts = np.round(pts, 1)
        got = lof(pts.tolist(), k)
        want = brute_lof(pts.tolist(), k)
        agree += all(g == w or abs(g - w) <= 1e-9 for g, w in zip(got, want))
    ok = agree == 500
    report(6, ok, f"{agree}/500 point sets match the definition within 1e-9")
    assert ok


_TOKENS = ["ds17", "OSD4", "mds2", "lnet3", "c12", "0xdead", "0XBEEF", "10.0.3.7@o2ib",
           "2017-03-01", "2024-01-02 03:04:05", "2024-01-02T03:04:05.123", "sdb", "sdaa",
           "1a2b3c4d-0000-1111-2222-333344445555", "LustreError:", "-5", "12", "ost", "lock",
           "timeout", "x", "::", "@", "."]


def _fuzz_string(rng):
    if rng.random() < 0.3:
        alphabet = string.ascii_letters + string.digits + " :-.@_/x"
        return "".join(rng.choice(list(alphabet), int(rng.integers(0, 50))))
    parts = rng.choice(_TOKENS, int(rng.integers(0, 10)))
    seps = rng.choice([" ", "", "-", ":", "  "], len(parts))
    return "".join(p + s for p, s in zip(parts, seps))


def test_criterion_7_log_diff_semantics(report):
    rng = np.random.default_rng(7)
    universe = [LogTemplate(f"T{i}") for i in range(12)]

    def sample_set():
        return {t for t in universe if rng.random() < 0.35}

    laws = 0
    for _ in range(1000):
        unhealthy = sample_set()
        healthy = [sample_set() for _ in range(int(rng.integers(1, 5)))]
        extra = sample_set()
        delta = log_delta(unhealthy, healthy)
        union = set().union(*healthy)
        laws += (delta <= unhealthy and not delta & union
                 and log_delta(unhealthy, healthy + [extra]) <= delta)
    idem = 0
    for _ in range(10_000):
        once = normalize(_fuzz_string(rng))
        idem += normalize(once) == once
    ok = laws == 1000 and idem == 10_000
    report(7, ok, f"delta laws {laws}/1000 triples; idempotence {idem}/10000 strings")
    assert ok


def test_criterion_8_identifiability(report):
    checked = agree = 0
    for clients, mds, ds, osds, lnets, g in itertools.product(
            (1, 2), (1, 2), (2, 4), (1, 2, 3), (2, 3, 4), (1, 2, 4)):
        if g > lnets:
            continue
        topo = build_topology(TopologySpec(clients=clients, mds=mds, data_servers=ds, osds=osds,
                                           lnets=lnets, group_size=g, seed=clients + osds))
        if len(topo.components) > 20:
            continue
        for monitors in ([], [topo.clients[0]], list(topo.clients)):
            def paths_for(m, t, topo=topo):
                return enumerate_paths(topo, m, t)
            for k in (1, 2, 3):
                got = check_identifiability(topo, monitors, k)[0]
                agree += got == brute_identifiable(topo, monitors, k, paths_for)
                checked += 1
    ok = checked > 0 and agree == checked
    report(8, ok, f"{agree}/{checked} (topology, monitors, k) cases match exhaustive enumeration")
    assert ok

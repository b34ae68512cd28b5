import pytest
from hypothesis import given
from hypothesis import strategies as st

from storeforensics.errors import ConfigError, InfeasibleError
from storeforensics.monitor import (OpKind, PathObservation, aggregate, plan_probes,
                                    select_monitors, split_windows)
from storeforensics.topology import (ComponentId, Kind, TopologySpec, build_topology, cid,
                                     check_identifiability)
from storeforensics.trace import ProbeRecord


def test_petastore_monitor_selection():
    topo = build_topology(TopologySpec.petastore_candidates())
    chosen = select_monitors(topo, topo.clients, 6, 1)
    groups = sorted(topo.client_group[c] for c in chosen)
    assert groups == ["ie", "login", "login", "login", "login", "service"]
    assert check_identifiability(topo, chosen, 1)[0]


def test_minimal_budget_one(minimal_topo):
    assert select_monitors(minimal_topo, minimal_topo.clients, 1) == (cid("C1"),)


def test_budget_zero_infeasible(minimal_topo):
    with pytest.raises(InfeasibleError) as err:
        select_monitors(minimal_topo, minimal_topo.clients, 0)
    assert err.value.witness is not None


def test_empty_candidates(minimal_topo):
    with pytest.raises(ConfigError):
        select_monitors(minimal_topo, [], 1)


@given(st.integers(1, 8), st.integers(0, 5))
def test_selection_always_identifiable(budget, seed):
    topo = build_topology(TopologySpec.ci(seed=seed))
    chosen = select_monitors(topo, topo.clients, budget, 1)
    assert len(chosen) <= budget
    assert check_identifiability(topo, chosen, 1)[0]


def test_petastore_plan_counts(peta_topo):
    plan = plan_probes(peta_topo, peta_topo.clients)
    counts = plan.counts()
    assert counts[OpKind.CRWR] == 72
    assert counts[OpKind.RMEX] == 72
    assert counts[OpKind.WREX] == 5184
    assert len(plan.probes) == 5328


def test_minimal_plan_counts(minimal_topo):
    counts = plan_probes(minimal_topo, ["C1"]).counts()
    assert (counts[OpKind.CRWR], counts[OpKind.RMEX], counts[OpKind.WREX]) == (1, 1, 3)


def test_hundred_monitor_plan_scales():
    topo = build_topology(TopologySpec(clients=100))
    plan = plan_probes(topo, topo.clients, interval_s=30)
    assert plan.interval_s == 30
    assert len(plan.probes) == 100 * (2 * 2) + 100 * (32 + 32)


@given(st.integers(1, 5), st.integers(1, 4), st.sampled_from([2, 4, 8]), st.integers(1, 9),
       st.integers(0, 2))
def test_plan_formula(clients, mds, ds, osds, mdts):
    spec = TopologySpec(clients=clients, mds=2 * mds if mdts else mds, data_servers=ds,
                        osds=osds, lnets=4, mdts=mdts)
    topo = build_topology(spec)
    plan = plan_probes(topo, topo.clients)
    meta = spec.mds + spec.mdts
    counts = plan.counts()
    assert counts[OpKind.CRWR] == counts[OpKind.RMEX] == clients * meta
    assert counts[OpKind.WREX] == clients * (ds + osds)
    per_op = {}
    for p in plan.probes:
        per_op[(p.monitor, p.target, p.op)] = per_op.get((p.monitor, p.target, p.op), 0) + 1
    assert set(per_op.values()) == {1}


def test_plan_rejects_non_client(minimal_topo):
    with pytest.raises(ConfigError):
        plan_probes(minimal_topo, ["DS1"])


def _rec(epoch, status, latency=100.0, target="OSD1", op=OpKind.WREX):
    return ProbeRecord(epoch, cid("C1"), cid(target), op, latency, status)


def test_aggregate_all_ok(minimal_topo):
    plan = plan_probes(minimal_topo, ["C1"])
    obs = aggregate([_rec(e, "ok") for e in range(5)], plan)
    assert [(o.n, o.y) for o in obs] == [(5, 5)]


def test_aggregate_timeouts(minimal_topo):
    plan = plan_probes(minimal_topo, ["C1"])
    recs = [_rec(e, "ok") for e in range(3)] + [_rec(e, "timeout", 30000.0) for e in (3, 4)]
    assert [(o.n, o.y) for o in aggregate(recs, plan)] == [(5, 3)]


def test_slow_counts_as_failure(minimal_topo):
    plan = plan_probes(minimal_topo, ["C1"])
    obs = aggregate([_rec(0, "slow", 2500.0), _rec(1, "ok")], plan)
    assert (obs[0].n, obs[0].y) == (2, 1)


def test_path_observation_invariants():
    with pytest.raises(ValueError):
        PathObservation(cid("C1"), cid("OSD1"), 0, 0, 0)
    with pytest.raises(ValueError):
        PathObservation(cid("C1"), cid("OSD1"), 0, 3, 4)


statuses = st.sampled_from(["ok", "slow", "timeout", "error"])


@given(st.lists(st.tuples(st.integers(0, 9), st.sampled_from(["OSD1", "DS1", "DS2", "MDS1"]),
                          statuses), max_size=60))
def test_aggregation_partitions_records(rows):
    topo = build_topology(TopologySpec(clients=1, mds=1, data_servers=2, osds=1, lnets=4))
    plan = plan_probes(topo, ["C1"])
    recs = [_rec(e, s, 100.0 if s == "ok" else 5000.0, t) for e, t, s in rows]
    for window, part in split_windows(recs, 5).items():
        obs = aggregate(part, plan, window)
        assert sum(o.n for o in obs) == len(part)
        assert sum(o.y for o in obs) == sum(r.status == "ok" for r in part)
        assert len({o.path_key for o in obs}) == len(obs)


def test_monitor_kind_check(minimal_topo):
    assert all(m.kind is Kind.CLIENT for m in plan_probes(minimal_topo, ["C1"]).monitors)
    assert ComponentId(Kind.CLIENT, 1) in minimal_topo

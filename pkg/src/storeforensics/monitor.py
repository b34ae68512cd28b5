"""Store-Ping planning, monitor placement and per-path evidence aggregation."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, InfeasibleError
from .topology import ComponentId, Kind, Topology, check_identifiability, enumerate_paths

log = logging.getLogger(__name__)


class OpKind(str, Enum):
    CRWR = "CrWr"  # create and write a file
    WREX = "WrEx"  # write to an existing file
    RMEX = "RmEx"  # remove an existing file


METADATA_OPS = (OpKind.CRWR, OpKind.RMEX)


@dataclass(frozen=True)
class Probe:
    monitor: ComponentId
    target: ComponentId
    op: OpKind


@dataclass(frozen=True)
class ProbePlan:
    topology_key: str
    monitors: tuple[ComponentId, ...]
    probes: tuple[Probe, ...]
    interval_s: int = 60
    inference_window_epochs: int = 5

    def counts(self) -> Counter:
        return Counter(p.op for p in self.probes)

    def per_pair(self) -> Counter:
        return Counter((p.monitor, p.target) for p in self.probes)

    def to_mapping(self) -> dict:
        return {
            "topology_key": self.topology_key,
            "monitors": [str(m) for m in self.monitors],
            "interval_s": self.interval_s,
            "inference_window_epochs": self.inference_window_epochs,
            "probes_per_epoch": len(self.probes),
        }


@dataclass(frozen=True)
class PathObservation:
    monitor: ComponentId
    target: ComponentId
    epoch_window: int
    n: int
    y: int

    def __post_init__(self):
        if self.n <= 0 or not 0 <= self.y <= self.n:
            raise ValueError(f"invalid counts N={self.n}, Y={self.y}")

    @property
    def path_key(self) -> tuple[ComponentId, ComponentId]:
        return (self.monitor, self.target)


def plan_probes(
    topo: Topology,
    monitors: Iterable[ComponentId | str],
    interval_s: int = 60,
    inference_window_epochs: int = 5,
) -> ProbePlan:
    """Probe list executed by every monitor each epoch.

    CrWr and RmEx go to every metadata server and metadata target; WrEx goes
    to every data server (server memory) and every OSD (disk).
    """
    mons = tuple(sorted({topo.require(m) for m in monitors}))
    for m in mons:
        if m.kind is not Kind.CLIENT:
            raise ConfigError(f"monitor {m} is not a client")
    if interval_s <= 0 or inference_window_epochs <= 0:
        raise ConfigError("interval and window length must be positive")
    meta = topo.of_kind(Kind.MDS) + topo.of_kind(Kind.MDT)
    data = topo.of_kind(Kind.DATA_SERVER) + topo.of_kind(Kind.OSD)
    probes = []
    for m in mons:
        for t in meta:
            probes.extend(Probe(m, t, op) for op in METADATA_OPS)
        probes.extend(Probe(m, t, OpKind.WREX) for t in data)
    return ProbePlan(topo.key, mons, tuple(probes), interval_s, inference_window_epochs)


def _coverage(topo: Topology, client: ComponentId) -> frozenset:
    covered = set()
    for t in topo.probe_targets:
        covered.update(enumerate_paths(topo, client, t).components)
    covered.discard(client)
    return frozenset(covered)


def select_monitors(
    topo: Topology,
    candidate_clients: Iterable[ComponentId | str],
    budget: int,
    k: int = 1,
    *,
    fill: bool = True,
    seed: int | None = None,
) -> tuple[ComponentId, ...]:
    """Greedy monitor placement satisfying identifiability for ``k`` failures.

    Monitors are added by largest marginal path coverage until the
    identifiability check passes.  Ties prefer client groups that have no
    monitor yet, then smaller groups.  With ``fill`` the rest of the budget
    is spent the same way, giving the monitoring layer spare monitors spread
    over client groups.  ``seed`` shuffles candidates within a group;
    otherwise the lowest index wins.
    """
    candidates = sorted({topo.require(c) for c in candidate_clients})
    if not candidates:
        raise ConfigError("no candidate clients")
    if budget < 1:
        _, witness = check_identifiability(topo, [], k)
        raise InfeasibleError(f"budget {budget} admits no monitors", witness)
    group_size = Counter(topo.client_group[c] for c in candidates)
    order = {c: i for i, c in enumerate(candidates)}
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(candidates))
        order = {c: int(perm[i]) for i, c in enumerate(candidates)}
    cover = {c: _coverage(topo, c) for c in candidates}

    chosen: list[ComponentId] = []
    covered: set = set()

    def rank(c):
        grp = topo.client_group[c]
        represented = any(topo.client_group[m] == grp for m in chosen)
        return (-len(cover[c] - covered), represented, group_size[grp], grp, order[c])

    ok, witness = False, None
    while len(chosen) < budget:
        remaining = [c for c in candidates if c not in chosen]
        if not remaining:
            break
        best = min(remaining, key=rank)
        chosen.append(best)
        covered |= cover[best]
        ok, witness = check_identifiability(topo, chosen, k)
        if ok:
            break
    if not ok:
        raise InfeasibleError(f"{len(chosen)} monitors cannot identify {k} failures", witness)
    if fill:
        while len(chosen) < budget:
            remaining = [c for c in candidates if c not in chosen]
            if not remaining:
                break
            best = min(remaining, key=rank)
            chosen.append(best)
            covered |= cover[best]
    return tuple(sorted(chosen))


def aggregate(records: Iterable, plan: ProbePlan, window: int = 0,
              slo_ms: float = 1000.0) -> list[PathObservation]:
    """Fold one inference window of probe records into Binomial evidence.

    Every record lands in exactly one observation keyed by (monitor,
    target).  A probe succeeds when its status is ``ok``: serviced without
    error within ``slo_ms``.  Planned pairs with no records are reported in
    the log and omitted.
    """
    n = Counter()
    y = Counter()
    for r in records:
        key = (r.monitor, r.target)
        n[key] += 1
        if r.status == "ok" and r.latency_ms <= slo_ms:
            y[key] += 1
    missing = [k for k in plan.per_pair() if k not in n]
    if missing:
        log.warning("window %d: %d planned paths have no records (N=0)", window, len(missing))
    return [PathObservation(m, t, window, n[(m, t)], y[(m, t)]) for (m, t) in sorted(n)]


def split_windows(records: Iterable, window_epochs: int) -> dict[int, list]:
    """Group records by inference window index (``epoch // window_epochs``)."""
    out: dict[int, list] = defaultdict(list)
    for r in records:
        out[r.epoch // window_epochs].append(r)
    return dict(out)

"""Storage cluster topology: typed components, redundancy groups, probe paths.

Components are identified by ``(kind, index)`` with 1-based indices, and
render as short names such as ``DS17`` or ``OSD3``.  A data path from a
client to an OSD traverses the client's compute network, one LNET node out of
a fixed group, the storage network and one data server of the OSD's HA pair.
"""

from __future__ import annotations

import itertools
import math
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import ConfigError, NotFoundError, PairingError, SpecError


class Kind(str, Enum):
    CLIENT = "C"
    COMPUTE_NET = "CN"
    STORAGE_NET = "SN"
    LNET = "LNET"
    MDS = "MDS"
    MGS = "MGS"
    DATA_SERVER = "DS"
    OSD = "OSD"
    MDT = "MDT"


# Longest prefixes first so "MDS" is not read as "MD" + "S".
_ID_RE = re.compile(r"^(LNET|MDS|MGS|MDT|OSD|CN|SN|DS|C)(\d+)$")

# Components that can be localized from probe paths.  Clients are probe
# endpoints, network segments sit on every path of their clients, and the
# management server is not on the I/O path.
LOCALIZABLE_KINDS = frozenset({Kind.LNET, Kind.MDS, Kind.MDT, Kind.DATA_SERVER, Kind.OSD})
SERVER_KINDS = frozenset({Kind.MDS, Kind.MGS, Kind.DATA_SERVER})
DISK_KINDS = frozenset({Kind.OSD, Kind.MDT})


@dataclass(frozen=True, order=True)
class ComponentId:
    kind: Kind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise SpecError(f"negative component index {self.index}")

    def __str__(self) -> str:
        return f"{self.kind.value}{self.index}"

    def __repr__(self) -> str:
        return f"ComponentId({self})"

    @classmethod
    def parse(cls, text: str | ComponentId) -> ComponentId:
        if isinstance(text, ComponentId):
            return text
        m = _ID_RE.match(text.strip())
        if not m:
            raise NotFoundError(f"cannot parse component id {text!r}")
        return cls(Kind(m.group(1)), int(m.group(2)))


def cid(text: str) -> ComponentId:
    """Shorthand for :meth:`ComponentId.parse`."""
    return ComponentId.parse(text)


@dataclass(frozen=True)
class TopologySpec:
    """Shape parameters for :func:`build_topology`.

    ``client_groups`` optionally splits the clients into named groups (for
    example login / service / import-export nodes); each group gets its own
    compute network segment.  When it is given it overrides ``clients``.
    """

    clients: int = 8
    mds: int = 2
    data_servers: int = 32
    osds: int = 32
    lnets: int = 8
    mgs: int = 1
    mdts: int = 0
    group_size: int = 4
    seed: int = 0
    client_groups: tuple[tuple[str, int], ...] | None = None

    @classmethod
    def ci(cls, seed: int = 0) -> TopologySpec:
        return cls(seed=seed)

    @classmethod
    def petastore(cls, seed: int = 0) -> TopologySpec:
        return cls(clients=6, mds=6, data_servers=432, osds=432, lnets=36, mdts=6, seed=seed)

    @classmethod
    def petastore_candidates(cls, seed: int = 0) -> TopologySpec:
        """PetaStore shape with the deployed monitor candidate pool."""
        return cls(
            mds=6, data_servers=432, osds=432, lnets=36, mdts=6, seed=seed,
            client_groups=(("login", 4), ("service", 64), ("ie", 25)),
        )

    @classmethod
    def from_mapping(cls, data: Mapping) -> TopologySpec:
        data = dict(data)
        preset = data.pop("preset", None)
        base = {"ci": cls.ci, "petastore": cls.petastore,
                "petastore_candidates": cls.petastore_candidates}
        if preset is not None and preset not in base:
            raise SpecError(f"unknown topology preset {preset!r}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown topology keys: {sorted(unknown)}")
        groups = data.get("client_groups")
        if groups is not None:
            items = groups.items() if isinstance(groups, Mapping) else groups
            data["client_groups"] = tuple((str(k), int(v)) for k, v in items)
        spec = base[preset]() if preset else cls()
        return replace(spec, **data)

    def to_mapping(self) -> dict:
        out = {f: getattr(self, f) for f in self.__dataclass_fields__}
        if self.client_groups is not None:
            out["client_groups"] = {k: v for k, v in self.client_groups}
        return out

    @property
    def groups(self) -> tuple[tuple[str, int], ...]:
        if self.client_groups is not None:
            return self.client_groups
        return (("clients", self.clients),)


@dataclass(frozen=True)
class ProbePath:
    """Components a probe from ``client`` to ``target`` depends on.

    ``serial_components`` must all be healthy; each redundancy group needs at
    least one healthy member; the target must be healthy.  Group members are
    listed in routing order (HA primary first).
    """

    client: ComponentId
    target: ComponentId
    serial_components: tuple[ComponentId, ...]
    redundancy_groups: tuple[tuple[ComponentId, ...], ...]

    @property
    def components(self) -> tuple[ComponentId, ...]:
        members = tuple(itertools.chain.from_iterable(self.redundancy_groups))
        return self.serial_components + members + (self.target,)

    @property
    def essential(self) -> frozenset[ComponentId]:
        """Components whose single failure breaks every route of this path."""
        single = (g[0] for g in self.redundancy_groups if len(g) == 1)
        return frozenset(self.serial_components) | {self.target} | frozenset(single)


@dataclass(frozen=True, eq=False)
class Topology:
    spec: TopologySpec
    components: tuple[ComponentId, ...]
    ha_pairs: tuple[tuple[ComponentId, ComponentId], ...]
    osd_owners: Mapping[ComponentId, tuple[ComponentId, ComponentId]]
    mds_pairs: tuple[tuple[ComponentId, ComponentId], ...]
    mdt_owners: Mapping[ComponentId, tuple[ComponentId, ComponentId]]
    lnet_groups: Mapping[tuple[ComponentId, ComponentId], tuple[ComponentId, ...]]
    mds_assignment: Mapping[int, ComponentId]
    domains: Mapping[ComponentId, int]
    client_group: Mapping[ComponentId, str]
    compute_net: Mapping[ComponentId, ComponentId]
    _index: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", frozenset(self.components))

    def __contains__(self, item) -> bool:
        return item in self._index

    @property
    def key(self) -> str:
        """Identity used to check that plans and scenarios agree."""
        return repr(sorted(self.spec.to_mapping().items()))

    def require(self, comp: ComponentId | str) -> ComponentId:
        comp = ComponentId.parse(comp)
        if comp not in self._index:
            raise NotFoundError(f"{comp} is not part of the topology")
        return comp

    def of_kind(self, *kinds: Kind) -> tuple[ComponentId, ...]:
        return tuple(c for c in self.components if c.kind in kinds)

    @cached_property
    def clients(self) -> tuple[ComponentId, ...]:
        return self.of_kind(Kind.CLIENT)

    @cached_property
    def probe_targets(self) -> tuple[ComponentId, ...]:
        return self.of_kind(Kind.MDS, Kind.MDT, Kind.DATA_SERVER, Kind.OSD)

    @cached_property
    def _partner(self) -> dict[ComponentId, ComponentId]:
        out = {}
        for a, b in self.ha_pairs + self.mds_pairs:
            out[a], out[b] = b, a
        return out

    def partner(self, comp: ComponentId) -> ComponentId | None:
        """HA partner of a data or metadata server, if it has one."""
        return self._partner.get(comp)

    def domain_of(self, comp: ComponentId) -> int | None:
        return self.domains.get(comp)

    def storage_net(self) -> ComponentId:
        return ComponentId(Kind.STORAGE_NET, 1)

    def validate(self) -> None:
        """Raise :class:`SpecError` if a structural invariant is violated."""
        ids = set(self.components)
        if len(ids) != len(self.components):
            raise SpecError("duplicate component ids")
        for osd in self.of_kind(Kind.OSD):
            pair = self.osd_owners.get(osd)
            if pair is None or len(set(pair)) != 2 or not set(pair) <= ids:
                raise SpecError(f"{osd} has no valid HA pair")
        for mdt in self.of_kind(Kind.MDT):
            pair = self.mdt_owners.get(mdt)
            if pair is None or not set(pair) <= ids:
                raise SpecError(f"{mdt} has no valid metadata server pair")
        g = self.spec.group_size
        for client in self.clients:
            for target in self.probe_targets:
                grp = self.lnet_groups.get((client, target))
                if grp is None or len(grp) != g or len(set(grp)) != g or not set(grp) <= ids:
                    raise SpecError(f"({client}, {target}) lacks a valid LNET group")


def build_topology(spec: TopologySpec) -> Topology:
    """Construct a :class:`Topology`; LNET group assignment is seeded."""
    counts = {"mds": spec.mds, "data_servers": spec.data_servers, "osds": spec.osds,
              "lnets": spec.lnets, "mgs": spec.mgs}
    for name, n in counts.items():
        if n < 1:
            raise SpecError(f"{name} must be >= 1, got {n}")
    if spec.mdts < 0:
        raise SpecError("mdts must be >= 0")
    if spec.data_servers % 2:
        raise PairingError(f"{spec.data_servers} data servers cannot form HA pairs")
    if spec.mdts and spec.mds % 2:
        raise PairingError(f"{spec.mds} metadata servers cannot form HA pairs for MDTs")
    groups = spec.groups
    if sum(n for _, n in groups) < 1 or any(n < 0 for _, n in groups):
        raise SpecError("topology needs at least one monitor-eligible client")
    if not 1 <= spec.group_size <= spec.lnets:
        raise SpecError(f"LNET group size {spec.group_size} needs 1..{spec.lnets} LNETs")

    def ids(kind, n):
        return [ComponentId(kind, i) for i in range(1, n + 1)]

    clients: list[ComponentId] = []
    client_group: dict[ComponentId, str] = {}
    compute_net: dict[ComponentId, ComponentId] = {}
    cns = ids(Kind.COMPUTE_NET, len(groups))
    for cn, (name, n) in zip(cns, groups):
        for _ in range(n):
            c = ComponentId(Kind.CLIENT, len(clients) + 1)
            clients.append(c)
            client_group[c] = name
            compute_net[c] = cn
    sn = ComponentId(Kind.STORAGE_NET, 1)
    lnets = ids(Kind.LNET, spec.lnets)
    mds = ids(Kind.MDS, spec.mds)
    mgs = ids(Kind.MGS, spec.mgs)
    dss = ids(Kind.DATA_SERVER, spec.data_servers)
    osds = ids(Kind.OSD, spec.osds)
    mdts = ids(Kind.MDT, spec.mdts)

    ha_pairs = tuple((dss[i], dss[i + 1]) for i in range(0, len(dss), 2))
    npairs = len(ha_pairs)
    osd_owners = {}
    for j, osd in enumerate(osds):
        a, b = ha_pairs[j % npairs]
        # alternate the primary so both members of a pair carry load
        osd_owners[osd] = (a, b) if (j // npairs) % 2 == 0 else (b, a)
    mds_pairs = tuple((mds[i], mds[i + 1]) for i in range(0, len(mds), 2)) if mdts else ()
    mdt_owners = {}
    for j, mdt in enumerate(mdts):
        a, b = mds_pairs[j % len(mds_pairs)]
        mdt_owners[mdt] = (a, b)

    # one filesystem domain per metadata server
    mds_assignment = {d + 1: m for d, m in enumerate(mds)}
    domains: dict[ComponentId, int] = {m: d + 1 for d, m in enumerate(mds)}
    for p, (a, b) in enumerate(ha_pairs):
        domains[a] = domains[b] = p % len(mds) + 1
    for osd, (a, _) in osd_owners.items():
        domains[osd] = domains[a]
    for mdt, (a, _) in mdt_owners.items():
        domains[mdt] = domains[a]

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x4C4E4554]))
    perm = [lnets[i] for i in rng.permutation(len(lnets))]
    g = spec.group_size
    n_groups = math.ceil(len(perm) / g)
    wrapped = perm + perm[: n_groups * g - len(perm)]
    partition = [tuple(wrapped[i * g:(i + 1) * g]) for i in range(n_groups)]
    targets = mds + mdts + dss + osds
    choice = rng.integers(n_groups, size=(len(clients), len(targets)))
    lnet_groups = {
        (c, t): partition[choice[i, j]]
        for i, c in enumerate(clients) for j, t in enumerate(targets)
    }

    components = tuple(sorted(clients + cns + [sn] + lnets + mds + mgs + dss + osds + mdts))
    topo = Topology(
        spec=spec, components=components, ha_pairs=ha_pairs, osd_owners=osd_owners,
        mds_pairs=mds_pairs, mdt_owners=mdt_owners, lnet_groups=lnet_groups,
        mds_assignment=mds_assignment, domains=domains, client_group=client_group,
        compute_net=compute_net,
    )
    return topo


def enumerate_paths(topo: Topology, client: ComponentId | str, target: ComponentId | str) -> ProbePath:
    """Probe path from a client to a metadata server, MDT, data server or OSD."""
    client = topo.require(client)
    target = topo.require(target)
    if client.kind is not Kind.CLIENT:
        raise ConfigError(f"{client} is not a client")
    if target.kind not in (Kind.MDS, Kind.MDT, Kind.DATA_SERVER, Kind.OSD):
        raise ConfigError(f"{target} is not a probe target")
    serial = (client, topo.compute_net[client], topo.storage_net())
    groups: list[tuple[ComponentId, ...]] = [topo.lnet_groups[(client, target)]]
    if target.kind is Kind.OSD:
        groups.append(topo.osd_owners[target])
    elif target.kind is Kind.MDT:
        groups.append(topo.mdt_owners[target])
    return ProbePath(client, target, serial, tuple(groups))


def _path_covers(path: ProbePath, v: ComponentId, failed: frozenset) -> bool:
    if v not in path.components or v in failed:
        return False
    if failed & (set(path.serial_components) | {path.target}):
        return False
    for group in path.redundancy_groups:
        if v in group:
            continue
        if all(m in failed for m in group):
            return False
    return True


def check_identifiability(
    topo: Topology,
    monitors: Iterable[ComponentId | str],
    k: int,
    *,
    exact_limit: int = 20,
    samples: int = 2000,
    seed: int = 0,
) -> tuple[bool, tuple[ComponentId, frozenset[ComponentId]] | None]:
    """Sufficient identifiability test for up to ``k`` failed components.

    Returns ``(True, None)`` when every localizable non-monitor component
    ``v`` has, for every failure set ``F`` (``|F| <= k``, ``v`` not in ``F``),
    a monitored probe route through ``v`` that avoids ``F``.  Otherwise the
    smallest violating ``(v, F)`` found is returned as witness.

    Topologies with at most ``exact_limit`` components are checked
    exhaustively.  Larger ones are checked exactly for ``|F| <= 1`` and by
    sampling ``samples`` random failure sets per larger size.
    """
    monitors = sorted({topo.require(m) for m in monitors})
    for m in monitors:
        if m.kind is not Kind.CLIENT:
            raise ConfigError(f"monitor {m} is not a client")
    universe = [c for c in topo.components if c.kind in LOCALIZABLE_KINDS]
    if k < 1 or k > len(universe):
        raise ConfigError(f"k={k} outside 1..{len(universe)}")
    paths = [enumerate_paths(topo, m, t) for m in monitors for t in topo.probe_targets]
    through: dict[ComponentId, list[ProbePath]] = {v: [] for v in universe}
    for p in paths:
        for c in p.components:
            if c in through:
                through[c].append(p)

    def covered(v, failed):
        return any(_path_covers(p, v, failed) for p in through[v])

    # |F| = 0 and |F| = 1 exactly, via the essential-set intersection
    for v in universe:
        if not through[v]:
            return False, (v, frozenset())
    for v in universe:
        common = None
        for p in through[v]:
            ess = set(p.essential)
            for g in p.redundancy_groups:
                if v in g:
                    ess.discard(v)
            common = ess if common is None else common & ess
            if not common:
                break
        common = (common or set()) - {v}
        blockers = sorted(c for c in common if c in through)
        if blockers and k >= 1:
            return False, (v, frozenset([blockers[0]]))
    if k == 1:
        return True, None

    if len(topo.components) <= exact_limit:
        for size in range(2, k + 1):
            for v in universe:
                others = [c for c in universe if c != v]
                for combo in itertools.combinations(others, min(size, len(others))):
                    failed = frozenset(combo)
                    if not covered(v, failed):
                        return False, (v, failed)
        return True, None

    rng = np.random.default_rng(seed)
    for size in range(2, k + 1):
        for _ in range(samples):
            v = universe[rng.integers(len(universe))]
            # bias failures towards the components v's paths depend on
            near = sorted({c for p in through[v] for c in p.components if c != v and c in through})
            pool = near if len(near) >= size and rng.random() < 0.8 else [c for c in universe if c != v]
            if len(pool) < size:
                continue
            picks = rng.choice(len(pool), size=size, replace=False)
            failed = frozenset(pool[i] for i in picks)
            if not covered(v, failed):
                return False, (v, failed)
    return True, None

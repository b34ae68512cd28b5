"""Trace-driven stand-in for a production cluster.

Generates Store-Ping outcomes, load metrics and error logs for a scenario
with injected faults.  Baseline probe latency is log-normal; faults act per
component:

* P1 fail-stop and P2 process crash make the component unable to serve.
* P3 gray failure drops a request with probability ``severity`` while the
  component keeps emitting heartbeats.
* P4 fail-slow multiplies latency by ``1 + severity * p4_multiplier``.
* P5 overload multiplies latency by ``1 + severity * p5_multiplier`` and
  shifts the component's load metrics.

A request through a redundancy group (the LNET group, an HA pair) is served
by the first member, in routing order, that can answer within the SLO;
every failover adds a latency penalty.  If no member can answer in time but
one is merely slow, the request is served slowly.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import Enum

import numpy as np

from .errors import ConfigError, NotFoundError, SpecError
from .monitor import OpKind, ProbePlan
from .topology import DISK_KINDS, SERVER_KINDS, ComponentId, Kind, ProbePath, Topology, enumerate_paths
from .trace import LogRecord, MetricSample, ProbeRecord, Trace


class FaultKind(str, Enum):
    P1_FAIL_STOP = "P1_FailStop"
    P2_PROCESS_CRASH = "P2_ProcessCrash"
    P3_GRAY = "P3_Gray"
    P4_FAIL_SLOW_MASKED = "P4_FailSlowMasked"
    P5_OVERLOAD = "P5_Overload"

    @classmethod
    def parse(cls, text: str | FaultKind) -> FaultKind:
        if isinstance(text, FaultKind):
            return text
        for k in cls:
            if text == k.value or text.upper() == k.value.split("_")[0]:
                return k
        raise SpecError(f"unknown fault kind {text!r}")

    @property
    def short(self) -> str:
        return self.value.split("_")[0]

    @property
    def is_failure(self) -> bool:
        return self is not FaultKind.P5_OVERLOAD


FAILURE_KINDS = tuple(k for k in FaultKind if k.is_failure)


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    target: ComponentId
    start_epoch: int
    end_epoch: int
    severity: float = 1.0

    def __post_init__(self):
        if self.start_epoch > self.end_epoch:
            raise SpecError(f"fault window [{self.start_epoch}, {self.end_epoch}] is empty")
        if not 0.0 < self.severity <= 1.0:
            raise SpecError(f"severity {self.severity} outside (0, 1]")

    def active(self, epoch: int) -> bool:
        return self.start_epoch <= epoch <= self.end_epoch

    def overlaps(self, first: int, last: int) -> bool:
        return self.start_epoch <= last and first <= self.end_epoch

    def to_mapping(self) -> dict:
        return {"kind": self.kind.short, "target": str(self.target), "start": self.start_epoch,
                "end": self.end_epoch, "severity": self.severity}

    @classmethod
    def from_mapping(cls, d: Mapping) -> FaultSpec:
        return cls(FaultKind.parse(d["kind"]), ComponentId.parse(d["target"]),
                   int(d.get("start", 0)), int(d["end"]), float(d.get("severity", 1.0)))


@dataclass(frozen=True)
class LatencyModel:
    """Per-op log-normal baseline (median in ms, sigma of log-latency)."""

    baseline: Mapping[OpKind, tuple[float, float]] = field(default_factory=lambda: {
        OpKind.CRWR: (math.log(150.0), 0.4),
        OpKind.WREX: (math.log(150.0), 0.4),
        OpKind.RMEX: (math.log(120.0), 0.4),
    })
    p4_multiplier: float = 52.7
    # mean completion time grows 7x at full overload
    p5_multiplier: float = 6.0
    failover_multiplier: float = 1.5
    slo_ms: float = 1000.0
    timeout_ms: float = 30000.0

    def __post_init__(self):
        if not self.slo_ms < self.timeout_ms:
            raise SpecError("slo_ms must be below timeout_ms")
        for op, (_, sigma) in self.baseline.items():
            if sigma <= 0:
                raise SpecError(f"sigma for {op} must be positive")

    @classmethod
    def from_mapping(cls, d: Mapping) -> LatencyModel:
        d = dict(d)
        base = cls().baseline
        if "baseline" in d:
            base = dict(base)
            for op, spec in d.pop("baseline").items():
                median, sigma = spec["median_ms"], spec["sigma"]
                base[OpKind(op)] = (math.log(median), float(sigma))
        return cls(baseline=base, **d)


@dataclass(frozen=True)
class SideChannelModel:
    loadavg_mean: float = 30.0
    loadavg_sd: float = 10.0
    overload_loadavg_shift: float = 340.0
    overload_loadavg_sd: float = 30.0
    takeover_load_factor: float = 2.0
    await_median_ms: float = 8.0
    await_sigma: float = 0.3
    overload_await_multiplier: float = 40.0
    utilization_logit_mean: float = -0.85
    utilization_logit_sd: float = 0.4
    overload_utilization_logit_shift: float = 4.0
    background_log_prob: float = 0.7
    fault_log_prob: float = 0.9


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    topology: Topology
    horizon: int
    faults: tuple[FaultSpec, ...] = ()
    latency: LatencyModel = field(default_factory=LatencyModel)
    side: SideChannelModel = field(default_factory=SideChannelModel)

    def __post_init__(self):
        if self.horizon < 1:
            raise SpecError("scenario horizon must be at least one epoch")

    def active_faults(self, epoch: int) -> dict[ComponentId, list[tuple[int, FaultSpec]]]:
        out: dict[ComponentId, list[tuple[int, FaultSpec]]] = {}
        for i, f in enumerate(self.faults):
            if f.active(epoch):
                out.setdefault(f.target, []).append((i, f))
        return out


def inject(scenario: Scenario, fault: FaultSpec) -> Scenario:
    if fault.target not in scenario.topology:
        raise NotFoundError(f"fault target {fault.target} is not part of the topology")
    if fault.start_epoch < 0 or fault.end_epoch >= scenario.horizon:
        raise ConfigError(f"fault window outside horizon 0..{scenario.horizon - 1}")
    return replace(scenario, faults=scenario.faults + (fault,))


@dataclass(frozen=True)
class ProbeOutcome:
    latency_ms: float
    status: str
    affected: frozenset[int] = frozenset()
    gray: bool = False


_DOWN = {FaultKind.P1_FAIL_STOP: "timeout", FaultKind.P2_PROCESS_CRASH: "error"}


def _component_state(faults, u):
    """(failure status or None, latency multiplier, fault ids, dropped-by-gray)."""
    if not faults:
        return None, 1.0, (), False
    ids = tuple(i for i, _ in faults)
    for kind in (FaultKind.P1_FAIL_STOP, FaultKind.P2_PROCESS_CRASH):
        if any(f.kind is kind for _, f in faults):
            return _DOWN[kind], 1.0, ids, False
    keep = 1.0
    for _, f in faults:
        if f.kind is FaultKind.P3_GRAY:
            keep *= 1.0 - f.severity
    if u < 1.0 - keep:
        return "timeout", 1.0, ids, True
    return None, None, ids, False


def _slowdown(faults, model: LatencyModel) -> float:
    m = 1.0
    for _, f in faults:
        if f.kind is FaultKind.P4_FAIL_SLOW_MASKED:
            m *= 1.0 + f.severity * model.p4_multiplier
        elif f.kind is FaultKind.P5_OVERLOAD:
            m *= 1.0 + f.severity * model.p5_multiplier
    return m


def sample_outcome(
    path: ProbePath,
    op: OpKind,
    active_faults: Mapping[ComponentId, Sequence[tuple[int, FaultSpec]]],
    rng: np.random.Generator,
    model: LatencyModel | None = None,
    lnet_start: int = 0,
) -> ProbeOutcome:
    """Draw one probe outcome.

    Consumes exactly ``1 + len(path.components)`` variates from ``rng``
    whatever faults are active, so paired runs stay aligned.
    ``active_faults`` maps components to ``(fault id, FaultSpec)`` pairs or
    plain FaultSpec values; a bare collection of FaultSpecs also works.
    """
    model = model or LatencyModel()
    if not isinstance(active_faults, Mapping):
        grouped: dict[ComponentId, list] = {}
        for f in active_faults:
            grouped.setdefault(f.target, []).append(f)
        active_faults = grouped
    comps = path.components
    z = rng.standard_normal()
    u = rng.random(len(comps))
    mu, sigma = model.baseline[op]
    base = math.exp(mu + sigma * z)
    uniform = dict(zip(comps, u))

    def faults_of(c):
        fs = active_faults.get(c, ())
        return [f if isinstance(f, tuple) else (-1, f) for f in fs]

    affected: set[int] = set()
    mult = 1.0
    failure = None
    gray = False
    for c in path.serial_components + (path.target,):
        fs = faults_of(c)
        status, _, ids, dropped = _component_state(fs, uniform[c])
        if status is not None:
            affected.update(ids)
            if failure is None or failure == "error":
                failure, gray = status, dropped
            continue
        m = _slowdown(fs, model)
        if m > 1.0:
            affected.update(ids)
        mult *= m

    for g, group in enumerate(path.redundancy_groups):
        order = group[lnet_start % len(group):] + group[:lnet_start % len(group)] if g == 0 else group
        chosen = None
        slow = []
        down_statuses = []
        for j, member in enumerate(order):
            fs = faults_of(member)
            status, _, ids, _ = _component_state(fs, uniform[member])
            if status is not None:
                affected.update(ids)
                down_statuses.append(status)
                continue
            m = _slowdown(fs, model)
            if base * mult * m > model.slo_ms:
                if m > 1.0:
                    affected.update(ids)
                slow.append((j, m))
                continue
            if m > 1.0:
                affected.update(ids)
            chosen = (j, m)
            break
        if chosen is None and slow:
            chosen = slow[0]
        if chosen is None:
            status = "timeout" if "timeout" in down_statuses else "error"
            if failure is None or failure == "error":
                failure = status
            continue
        j, m = chosen
        mult *= m * model.failover_multiplier ** j

    if failure == "timeout":
        return ProbeOutcome(model.timeout_ms, "timeout", frozenset(affected), gray)
    if failure == "error":
        return ProbeOutcome(round(min(base, model.slo_ms), 6), "error", frozenset(affected))
    latency = base * mult
    if latency >= model.timeout_ms:
        return ProbeOutcome(model.timeout_ms, "timeout", frozenset(affected))
    latency = round(latency, 6)
    return ProbeOutcome(latency, "slow" if latency > model.slo_ms else "ok", frozenset(affected))


# -- side channels ---------------------------------------------------------

_EPOCH0 = datetime(2017, 3, 1)

BACKGROUND_TEMPLATES = {
    "server": (
        "Lustre: scratch-OST{n4}: Client {uuid} (at {ip}@o2ib) reconnecting",
        "Lustre: scratch-OST{n4}: Connection restored to {uuid} (at {ip}@o2ib)",
        "LNet: {n} messages received from {ip}@o2ib in the last {n} seconds",
        "systemd[1]: Started Session {n} of user root.",
    ),
    "disk": (
        "md/raid:md{n}: scrub progress {n}%",
        "sd {n}:0:0:{n}: [{dev}] Write cache: enabled, read cache: enabled",
    ),
    "lnet": (
        "LNet: Added route to o2ib{n} via {ip}@o2ib",
        "LNet: router checker: {n} peers alive",
    ),
}

FAULT_TEMPLATES = {
    FaultKind.P1_FAIL_STOP: (
        "LustreError: {n}:0:(ldlm_lockd.c:{n}:expired_lock_main()) ### lock callback timer "
        "expired after {n}s: evicting client at {ip}@o2ib",
        "kernel: Kernel panic - not syncing: Watchdog detected hard LOCKUP on cpu {n}",
    ),
    FaultKind.P2_PROCESS_CRASH: (
        "LustreError: {n}:0:(service.c:{n}:ptlrpc_server_handle_request()) ll_ost_io{n}_{n}: "
        "process {n} exited with signal 11",
        "Lustre: scratch-OST{n4}: service thread pid {n} was inactive for {n}s",
    ),
    FaultKind.P3_GRAY: (
        "LNetError: {n}:0:(o2iblnd_cb.c:{n}:kiblnd_rx_complete()) Rx from {ip}@o2ib failed: "
        "dropping message",
        "LustreError: {n}:0:(events.c:{n}:request_in_callback()) request buffer overflow, "
        "dropping request from {ip}@o2ib",
    ),
    FaultKind.P4_FAIL_SLOW_MASKED: (
        "md/raid:md{n}: Disk failure on {dev}, disabling device. Operation continuing on {n} devices",
        "md: recovery of RAID array md{n} started",
    ),
}


def _template_family(comp: ComponentId) -> str | None:
    if comp.kind in SERVER_KINDS:
        return "server"
    if comp.kind in DISK_KINDS:
        return "disk"
    if comp.kind is Kind.LNET:
        return "lnet"
    return None


def _render(template: str, rng: np.random.Generator) -> str:
    ints = rng.integers(1, 100000, size=8)
    ip = ".".join(str(v) for v in rng.integers(1, 255, size=4))
    dev = "sd" + "".join(chr(97 + int(v)) for v in rng.integers(0, 26, size=2))
    uuid = "".join(f"{int(v):02x}" for v in rng.integers(0, 256, size=16))
    uuid = f"{uuid[:8]}-{uuid[8:12]}-{uuid[12:16]}-{uuid[16:20]}-{uuid[20:]}"
    it = iter(ints)
    out = []
    for part in template.split("{n}"):
        out.append(part)
        out.append(str(next(it, 7)))
    text = "".join(out[:-1])
    return (text.replace("{n4}", f"{int(ints[-1]) % 10000:04d}").replace("{ip}", ip)
            .replace("{dev}", dev).replace("{uuid}", uuid))


def emit_side_channels(scenario: Scenario, epoch: int, rng: np.random.Generator,
                       interval_s: int = 60) -> tuple[list[MetricSample], list[LogRecord]]:
    """Metrics and error logs of every server, disk and LNET node for ``epoch``."""
    if not 0 <= epoch < scenario.horizon:
        raise ConfigError(f"epoch {epoch} outside horizon")
    topo = scenario.topology
    side = scenario.side
    active = scenario.active_faults(epoch)
    kinds_at = {c: {f.kind for _, f in fs} for c, fs in active.items()}
    took_over = set()
    for c, kinds in kinds_at.items():
        if kinds & {FaultKind.P1_FAIL_STOP, FaultKind.P2_PROCESS_CRASH}:
            partner = topo.partner(c)
            if partner is not None:
                took_over.add(partner)

    def overload(c):
        return sum(f.severity for _, f in active.get(c, ()) if f.kind is FaultKind.P5_OVERLOAD)

    metrics: list[MetricSample] = []
    logs: list[LogRecord] = []
    stamp = (_EPOCH0 + timedelta(seconds=epoch * interval_s)).strftime("%Y-%m-%d %H:%M:%S")
    for c in topo.components:
        kinds = kinds_at.get(c, set())
        crashed = FaultKind.P1_FAIL_STOP in kinds
        if c.kind in SERVER_KINDS:
            z = rng.standard_normal(2)
            sev = overload(c)
            if sev > 0:
                load = side.loadavg_mean + sev * side.overload_loadavg_shift + side.overload_loadavg_sd * z[1]
            else:
                load = side.loadavg_mean + side.loadavg_sd * z[0]
            if c in took_over:
                load *= side.takeover_load_factor
            if FaultKind.P2_PROCESS_CRASH in kinds:
                load *= 0.3
            if not crashed:
                metrics.append(MetricSample(c, epoch, loadavg=round(max(load, 0.0), 6)))
        elif c.kind in DISK_KINDS:
            z = rng.standard_normal(2)
            sev = overload(c)
            await_ms = side.await_median_ms * math.exp(side.await_sigma * z[0])
            util_logit = side.utilization_logit_mean + side.utilization_logit_sd * z[1]
            if sev > 0:
                await_ms *= 1.0 + sev * side.overload_await_multiplier
                util_logit += sev * side.overload_utilization_logit_shift
            if not crashed:
                metrics.append(MetricSample(c, epoch, await_ms=round(await_ms, 6),
                                            utilization=round(1.0 / (1.0 + math.exp(-util_logit)), 6)))
        family = _template_family(c)
        if family is None:
            continue
        host = str(c).lower()
        pool = BACKGROUND_TEMPLATES[family]
        draws = rng.random(len(pool) + 2)
        if not crashed:
            for t, u in zip(pool, draws):
                if u < side.background_log_prob:
                    logs.append(LogRecord(c, epoch, f"{stamp} {host} {_render(t, rng)}"))
        for kind in sorted(kinds - {FaultKind.P5_OVERLOAD}, key=lambda k: k.value):
            for j, t in enumerate(FAULT_TEMPLATES[kind]):
                if j == 0 or draws[len(pool) + j - 1] < side.fault_log_prob:
                    logs.append(LogRecord(c, epoch, f"{stamp} {host} {_render(t, rng)}"))
    return metrics, logs


# -- scenario execution ----------------------------------------------------

def run_scenario(scenario: Scenario, plan: ProbePlan, seed: int) -> Trace:
    """Execute every planned probe each epoch; deterministic in (scenario, plan, seed)."""
    topo = scenario.topology
    if plan.topology_key != topo.key:
        raise ConfigError("probe plan and scenario use different topologies")
    root = np.random.SeedSequence([seed, 0x5350494E47])
    probe_ss, side_ss, rr_ss = root.spawn(3)
    probe_rng = np.random.default_rng(probe_ss)
    side_rng = np.random.default_rng(side_ss)
    pairs = sorted(plan.per_pair())
    starts = np.random.default_rng(rr_ss).integers(0, topo.spec.group_size, size=len(pairs))
    rr = {p: int(s) for p, s in zip(pairs, starts)}
    paths = {p: enumerate_paths(topo, *p) for p in pairs}

    n_faults = len(scenario.faults)
    affected = [0] * n_faults
    degraded = [0] * n_faults
    trace = Trace(scenario.scenario_id, seed)
    model = scenario.latency
    for epoch in range(scenario.horizon):
        active = scenario.active_faults(epoch)
        for probe in plan.probes:
            key = (probe.monitor, probe.target)
            path = paths[key]
            start = rr[key]
            rr[key] = start + 1
            out = sample_outcome(path, probe.op, active, probe_rng, model, lnet_start=start)
            for i in out.affected:
                affected[i] += 1
                if out.status != "ok":
                    degraded[i] += 1
            trace.probes.append(ProbeRecord(epoch, probe.monitor, probe.target, probe.op,
                                            out.latency_ms, out.status, out.gray))
        metrics, logs = emit_side_channels(scenario, epoch, side_rng, plan.interval_s)
        trace.metrics.extend(metrics)
        trace.logs.extend(logs)

    trace.ground_truth = {
        "scenario_id": scenario.scenario_id,
        "seed": seed,
        "horizon": scenario.horizon,
        "faults": [
            dict(f.to_mapping(), id=i, probes_affected=affected[i], probes_degraded=degraded[i])
            for i, f in enumerate(scenario.faults)
        ],
    }
    return trace


@dataclass(frozen=True)
class FaultMix:
    """Random fault generator settings for batch scenarios."""

    failures: int = 1
    overloads: int = 1
    failure_kinds: tuple[FaultKind, ...] = FAILURE_KINDS
    target_kinds: tuple[Kind, ...] = (Kind.DATA_SERVER, Kind.OSD, Kind.MDS)
    severity: Mapping[FaultKind, tuple[float, float]] = field(default_factory=lambda: {
        FaultKind.P1_FAIL_STOP: (1.0, 1.0),
        FaultKind.P2_PROCESS_CRASH: (1.0, 1.0),
        FaultKind.P3_GRAY: (0.5, 1.0),
        FaultKind.P4_FAIL_SLOW_MASKED: (0.5, 1.0),
        FaultKind.P5_OVERLOAD: (0.9, 1.0),
    })

    @classmethod
    def from_mapping(cls, d: Mapping) -> FaultMix:
        d = dict(d)
        if "failure_kinds" in d:
            d["failure_kinds"] = tuple(FaultKind.parse(k) for k in d["failure_kinds"])
        if "target_kinds" in d:
            d["target_kinds"] = tuple(Kind(k) for k in d["target_kinds"])
        if "severity" in d:
            sev = dict(cls().severity)
            sev.update({FaultKind.parse(k): tuple(v) for k, v in d["severity"].items()})
            d["severity"] = sev
        return cls(**d)


def random_faults(topo: Topology, mix: FaultMix, horizon: int,
                  rng: np.random.Generator) -> tuple[FaultSpec, ...]:
    """Faults on distinct targets, each active for the whole horizon."""
    pool = [c for c in topo.components if c.kind in mix.target_kinds]
    total = mix.failures + mix.overloads
    if total > len(pool):
        raise ConfigError(f"{total} faults requested but only {len(pool)} eligible targets")
    picks = rng.choice(len(pool), size=total, replace=False)
    faults = []
    for n, i in enumerate(picks):
        if n < mix.failures:
            kind = mix.failure_kinds[rng.integers(len(mix.failure_kinds))]
        else:
            kind = FaultKind.P5_OVERLOAD
        lo, hi = mix.severity[kind]
        sev = float(lo if lo == hi else rng.uniform(lo, hi))
        faults.append(FaultSpec(kind, pool[int(i)], 0, horizon - 1, round(sev, 4)))
    return tuple(faults)

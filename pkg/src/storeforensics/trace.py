"""Trace records and their line-delimited JSON encoding."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

from .monitor import OpKind
from .topology import ComponentId

STATUSES = ("ok", "slow", "timeout", "error")


@dataclass(frozen=True)
class ProbeRecord:
    epoch: int
    monitor: ComponentId
    target: ComponentId
    op: OpKind
    latency_ms: float
    status: str
    gray: bool = False

    def to_json(self) -> dict:
        d = {"type": "probe", "epoch": self.epoch, "monitor": str(self.monitor),
             "target": str(self.target), "op": self.op.value,
             "latency_ms": round(self.latency_ms, 6), "status": self.status}
        if self.gray:
            d["gray"] = True
        return d

    @classmethod
    def from_json(cls, d: dict) -> ProbeRecord:
        return cls(d["epoch"], ComponentId.parse(d["monitor"]), ComponentId.parse(d["target"]),
                   OpKind(d["op"]), float(d["latency_ms"]), d["status"], d.get("gray", False))


@dataclass(frozen=True)
class MetricSample:
    """Load metrics; servers report ``loadavg``, disks ``await_ms``/``utilization``."""

    component: ComponentId
    epoch: int
    loadavg: float | None = None
    await_ms: float | None = None
    utilization: float | None = None

    def get(self, metric: str) -> float | None:
        return getattr(self, metric)

    def to_json(self) -> dict:
        d = {"type": "metric", "epoch": self.epoch, "component": str(self.component)}
        for name in ("loadavg", "await_ms", "utilization"):
            v = getattr(self, name)
            if v is not None:
                d[name] = round(v, 6)
        return d

    @classmethod
    def from_json(cls, d: dict) -> MetricSample:
        return cls(ComponentId.parse(d["component"]), d["epoch"], d.get("loadavg"),
                   d.get("await_ms"), d.get("utilization"))


@dataclass(frozen=True)
class LogRecord:
    component: ComponentId
    epoch: int
    raw_text: str

    def __post_init__(self):
        if not self.raw_text:
            raise ValueError("empty log record")

    def to_json(self) -> dict:
        return {"type": "log", "epoch": self.epoch, "component": str(self.component),
                "text": self.raw_text}

    @classmethod
    def from_json(cls, d: dict) -> LogRecord:
        return cls(ComponentId.parse(d["component"]), d["epoch"], d["text"])


@dataclass
class Trace:
    scenario_id: str
    seed: int
    probes: list[ProbeRecord] = field(default_factory=list)
    metrics: list[MetricSample] = field(default_factory=list)
    logs: list[LogRecord] = field(default_factory=list)
    ground_truth: dict = field(default_factory=dict)

    def epoch_range(self, first: int, last: int) -> Trace:
        """Records with ``first <= epoch <= last`` (ground truth is shared)."""
        def keep(r):
            return first <= r.epoch <= last

        return Trace(self.scenario_id, self.seed, [r for r in self.probes if keep(r)],
                     [r for r in self.metrics if keep(r)], [r for r in self.logs if keep(r)],
                     self.ground_truth)

    def iter_json(self) -> Iterator[dict]:
        yield {"type": "header", "scenario_id": self.scenario_id, "seed": self.seed}
        for r in self.probes:
            yield r.to_json()
        for r in self.metrics:
            yield r.to_json()
        for r in self.logs:
            yield r.to_json()

    def dump(self, path: str | Path, truth_path: str | Path | None = None) -> None:
        write_jsonl(path, self.iter_json())
        if truth_path is not None:
            Path(truth_path).write_text(json.dumps(self.ground_truth, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, truth_path: str | Path | None = None) -> Trace:
        trace = cls("", 0)
        decoders = {"probe": (ProbeRecord, trace.probes), "metric": (MetricSample, trace.metrics),
                    "log": (LogRecord, trace.logs)}
        for d in read_jsonl(path):
            kind = d.get("type")
            if kind == "header":
                trace.scenario_id, trace.seed = d["scenario_id"], d["seed"]
            elif kind in decoders:
                rec_cls, sink = decoders[kind]
                sink.append(rec_cls.from_json(d))
            else:
                raise ValueError(f"unknown record type {kind!r} in {path}")
        if truth_path is not None and Path(truth_path).exists():
            trace.ground_truth = json.loads(Path(truth_path).read_text())
        return trace


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)

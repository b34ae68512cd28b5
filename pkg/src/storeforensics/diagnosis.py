"""Root-cause attribution for components flagged unhealthy.

Two independent signals are combined:

* overload: a component's load metric is a density outlier among its
  homogeneous peers (local outlier factor, scored per metric);
* failure: the component emits normalized error-log templates that none of
  its healthy peers emit (the log delta).
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientDataError
from .topology import DISK_KINDS, SERVER_KINDS, ComponentId, Kind
from .trace import LogRecord, MetricSample

log = logging.getLogger(__name__)

# metric name -> MetricSample attribute
METRICS = {"loadavg": "loadavg", "await": "await_ms", "utilization": "utilization"}


# -- local outlier factor --------------------------------------------------

def _density_ratio(num: float, den: float) -> float:
    if math.isinf(num) and math.isinf(den):
        return 1.0
    if math.isinf(den):
        return 0.0
    if math.isinf(num):
        return math.inf
    return num / den


def lof(points: Sequence[float] | Sequence[Sequence[float]], k: int) -> list[float]:
    """Local outlier factor of every point (Euclidean distance).

    Follows the reachability-distance formulation: the neighbourhood of a
    point holds every other point within its k-distance, ties included.
    Where duplicates make a local reachability density infinite, density
    ratios use inf/inf = 1, finite/inf = 0 and inf/finite = inf; a set of
    identical points therefore scores 1.0 throughout.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if k < 1:
        raise ConfigError("k must be at least 1")
    if n < k + 1:
        raise InsufficientDataError(f"LOF with k={k} needs at least {k + 1} points, got {n}")
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    kdist = np.sort(dist, axis=1)[:, k - 1]
    neigh = dist <= kdist[:, None]
    reach = np.maximum(dist, kdist[None, :])
    sizes = neigh.sum(axis=1)
    total = np.where(neigh, reach, 0.0).sum(axis=1)
    with np.errstate(divide="ignore"):
        lrd = np.where(total > 0, sizes / np.where(total > 0, total, 1.0), np.inf)
    scores = []
    for p in range(n):
        others = np.flatnonzero(neigh[p])
        if np.isfinite(lrd[p]) and np.all(np.isfinite(lrd[others])):
            scores.append(float(lrd[others].sum() / lrd[p] / len(others)))
        else:
            scores.append(sum(_density_ratio(lrd[o], lrd[p]) for o in others) / len(others))
    return scores


def default_k(group_size: int) -> int:
    """Neighbourhood size: ten percent of the group, at least five."""
    return max(5, math.ceil(0.1 * group_size))


# -- overload evidence -----------------------------------------------------

@dataclass(frozen=True)
class OverloadEvidence:
    component: ComponentId
    metric: str
    lof_score: float
    k: int
    window: int = 0
    value: float = 0.0

    def to_json(self) -> dict:
        return {"metric": self.metric, "lof": round(self.lof_score, 4), "k": self.k,
                "value": round(self.value, 4)}


@dataclass(frozen=True)
class DiagnosisConfig:
    lof_threshold: float = 1.5
    lof_k: int | None = None
    metrics: tuple[str, ...] = ("loadavg", "await", "utilization")
    min_occurrences: int = 1
    rules_path: str | None = None
    min_ratio: float = 1.5

    def __post_init__(self):
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}")
        if self.lof_threshold <= 0:
            raise ConfigError("lof_threshold must be positive")
        if self.min_occurrences < 1:
            raise ConfigError("min_occurrences must be at least 1")
        if self.min_ratio < 1.0:
            raise ConfigError("min_ratio must be at least 1")


def _family(kind: Kind) -> str | None:
    if kind in SERVER_KINDS:
        return "server"
    if kind in DISK_KINDS:
        return "disk"
    return None


def window_means(metrics: Iterable[MetricSample], metric: str) -> dict[ComponentId, float]:
    """Per-component mean of one metric over the samples given."""
    attr = METRICS[metric]
    acc: dict[ComponentId, list[float]] = defaultdict(list)
    for s in metrics:
        v = s.get(attr)
        if v is not None:
            acc[s.component].append(v)
    return {c: float(np.mean(v)) for c, v in acc.items()}


def detect_overload(
    metrics: Iterable[MetricSample],
    unhealthy: Iterable[ComponentId],
    cfg: DiagnosisConfig | None = None,
    window: int = 0,
) -> list[OverloadEvidence]:
    """Metric outliers among the unhealthy components.

    Each metric is scored on window means within a group of components of
    the same kind.  A group too small for the neighbourhood size is pooled
    with the other kinds of its family (servers or disks).  Evidence needs
    a LOF score above the threshold and a value above the group median by
    at least ``cfg.min_ratio``.  LOF is scale-free, so without the ratio
    gate ordinary spread among healthy peers can pass the threshold.
    """
    cfg = cfg or DiagnosisConfig()
    metrics = list(metrics)
    unhealthy = set(unhealthy)
    evidence = []
    reported_missing = set()
    for metric in cfg.metrics:
        means = window_means(metrics, metric)
        by_kind: dict[Kind, list[ComponentId]] = defaultdict(list)
        for c in sorted(means):
            by_kind[c.kind].append(c)
        for comp in sorted(unhealthy):
            if _family(comp.kind) is None:
                continue
            if comp not in means:
                if metric_applies(comp.kind, metric) and comp not in reported_missing:
                    log.warning("window %d: %s has no %s samples; skipped", window, comp, metric)
                    reported_missing.add(comp)
                continue
            group = by_kind[comp.kind]
            k = cfg.lof_k or default_k(len(group))
            if len(group) < k + 1:
                family = _family(comp.kind)
                group = sorted(c for c in means if _family(c.kind) == family)
                k = cfg.lof_k or default_k(len(group))
            if len(group) < k + 1:
                log.warning("window %d: only %d %s values near %s; skipped", window,
                            len(group), metric, comp)
                continue
            values = [means[c] for c in group]
            scores = lof(values, k)
            i = group.index(comp)
            median = float(np.median(values))
            if (scores[i] > cfg.lof_threshold and values[i] > median
                    and values[i] >= cfg.min_ratio * median):
                evidence.append(OverloadEvidence(comp, metric, scores[i], k, window, values[i]))
    return evidence


def metric_applies(kind: Kind, metric: str) -> bool:
    if metric == "loadavg":
        return kind in SERVER_KINDS
    return kind in DISK_KINDS


# -- log templates ---------------------------------------------------------

@dataclass(frozen=True)
class LogTemplate:
    normalized_text: str
    source_kind: Kind | None = field(default=None, compare=False)

    def __str__(self) -> str:
        return self.normalized_text


@dataclass(frozen=True)
class RewriteRule:
    pattern: re.Pattern
    placeholder: str


def load_rules(path: str | Path | None = None) -> tuple[RewriteRule, ...]:
    """Parse a rule file: one ``regex => placeholder`` per line, ``#`` comments."""
    if path is None:
        text = resources.files("storeforensics").joinpath("data/rewrite_rules.txt").read_text()
    else:
        text = Path(path).read_text()
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=>" not in line:
            raise ConfigError(f"rule line {lineno} lacks '=>'")
        pattern, placeholder = (s.strip() for s in line.rsplit("=>", 1))
        try:
            rules.append(RewriteRule(re.compile(pattern), placeholder))
        except re.error as exc:
            raise ConfigError(f"rule line {lineno}: {exc}") from None
    return tuple(rules)


_DEFAULT_RULES: tuple[RewriteRule, ...] | None = None


def _default_rules() -> tuple[RewriteRule, ...]:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_rules()
    return _DEFAULT_RULES


def normalize(text: str, rules: Sequence[RewriteRule] | None = None) -> str:
    """Replace time- and node-specific tokens with placeholders.

    Rules are applied in order, repeatedly, until the text stops changing,
    so the result is a fixed point and normalization is idempotent.
    """
    rules = _default_rules() if rules is None else rules
    for _ in range(32):
        out = text
        for r in rules:
            out = r.pattern.sub(r.placeholder, out)
        out = " ".join(out.split())
        if out == text:
            return out
        text = out
    raise ConfigError("rewrite rules do not converge")


def template_logs(
    records: Iterable[LogRecord],
    rules: Sequence[RewriteRule] | None = None,
    min_occurrences: int = 1,
) -> dict[ComponentId, set[LogTemplate]]:
    """Per-component sets of normalized templates.

    Templates seen fewer than ``min_occurrences`` times on a component are
    dropped (the default keeps everything).
    """
    counts: dict[ComponentId, Counter] = defaultdict(Counter)
    for r in records:
        counts[r.component][normalize(r.raw_text, rules)] += 1
    return {c: {LogTemplate(t, c.kind) for t, n in cnt.items() if n >= min_occurrences}
            for c, cnt in counts.items()}


@dataclass(frozen=True)
class LogEvidence:
    component: ComponentId
    delta: frozenset[LogTemplate]
    comparison_group: tuple[ComponentId, ...] = ()

    def to_json(self) -> dict:
        return {"delta": sorted(t.normalized_text for t in self.delta),
                "comparison_size": len(self.comparison_group)}


def log_delta(unhealthy_templates: Iterable[LogTemplate],
              healthy_template_sets: Sequence[Iterable[LogTemplate]]) -> set[LogTemplate]:
    """Templates of the unhealthy component absent from every healthy peer."""
    healthy_template_sets = list(healthy_template_sets)
    if not healthy_template_sets:
        raise ConfigError("log delta needs at least one healthy component to compare against")
    union: set[LogTemplate] = set()
    for s in healthy_template_sets:
        union.update(s)
    return set(unhealthy_templates) - union


def comparison_group(comp: ComponentId, candidates: Iterable[ComponentId],
                     flagged: Iterable[ComponentId]) -> tuple[ComponentId, ...]:
    """Healthy peers of ``comp``: unflagged components of its kind, else of its family."""
    flagged = set(flagged)
    healthy = [c for c in candidates if c not in flagged and c != comp]
    same = sorted(c for c in healthy if c.kind is comp.kind)
    if same:
        return tuple(same)
    fam = _family(comp.kind)
    return tuple(sorted(c for c in healthy if fam is not None and _family(c.kind) == fam))


def collect_log_evidence(
    templates: Mapping[ComponentId, set[LogTemplate]],
    unhealthy: Iterable[ComponentId],
    population: Iterable[ComponentId],
) -> dict[ComponentId, LogEvidence]:
    """Log delta of every unhealthy component that has healthy peers."""
    unhealthy = sorted(set(unhealthy))
    population = list(population)
    out = {}
    for comp in unhealthy:
        group = comparison_group(comp, population, unhealthy)
        if not group:
            log.warning("%s has no healthy peers; log evidence skipped", comp)
            continue
        delta = log_delta(templates.get(comp, set()), [templates.get(c, set()) for c in group])
        out[comp] = LogEvidence(comp, frozenset(delta), group)
    return out


# -- attribution -----------------------------------------------------------

class Verdict(str, Enum):
    FAILURE = "Failure"
    OVERLOAD = "Overload"
    BOTH = "Both"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Diagnosis:
    component: ComponentId
    verdict: Verdict
    log_evidence: LogEvidence | None = None
    overload_evidence: tuple[OverloadEvidence, ...] = ()
    window: int = 0

    def to_json(self) -> dict:
        d = {"window": self.window, "component": str(self.component),
             "verdict": self.verdict.value}
        if self.log_evidence is not None and self.log_evidence.delta:
            d["log_evidence"] = self.log_evidence.to_json()
        if self.overload_evidence:
            d["overload_evidence"] = [e.to_json() for e in self.overload_evidence]
        return d


def attribute(
    unhealthy: Iterable[ComponentId],
    overload_ev: Iterable[OverloadEvidence],
    log_ev: Mapping[ComponentId, LogEvidence],
    window: int = 0,
) -> list[Diagnosis]:
    """One verdict per unhealthy component, ordered by component."""
    by_comp: dict[ComponentId, list[OverloadEvidence]] = defaultdict(list)
    for e in overload_ev:
        by_comp[e.component].append(e)
    out = []
    for comp in sorted(set(unhealthy)):
        logs = log_ev.get(comp)
        failed = logs is not None and bool(logs.delta)
        loaded = bool(by_comp.get(comp))
        if failed and loaded:
            verdict = Verdict.BOTH
        elif failed:
            verdict = Verdict.FAILURE
        elif loaded:
            verdict = Verdict.OVERLOAD
        else:
            verdict = Verdict.UNKNOWN
        out.append(Diagnosis(comp, verdict, logs if failed else None,
                             tuple(by_comp.get(comp, ())), window))
    return out


def diagnose(
    unhealthy: Iterable[ComponentId],
    metrics: Iterable[MetricSample],
    logs: Iterable[LogRecord],
    population: Iterable[ComponentId],
    cfg: DiagnosisConfig | None = None,
    window: int = 0,
) -> list[Diagnosis]:
    """Overload and log evidence for one window, combined into verdicts."""
    cfg = cfg or DiagnosisConfig()
    unhealthy = set(unhealthy)
    rules = load_rules(cfg.rules_path) if cfg.rules_path else None
    overload = detect_overload(metrics, unhealthy, cfg, window)
    templates = template_logs(logs, rules, cfg.min_occurrences)
    log_ev = collect_log_evidence(templates, unhealthy, population)
    return attribute(unhealthy, overload, log_ev, window)

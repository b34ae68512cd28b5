"""End-to-end orchestration, scoring against ground truth, and heatmaps."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .diagnosis import Diagnosis, Verdict, diagnose
from .errors import EmptyWindowError
from .inference import (HealthPosterior, build_graph, carry_forward, flag_unhealthy, infer)
from .monitor import ProbePlan, aggregate, plan_probes, select_monitors, split_windows
from .simulator import FaultKind, Scenario, random_faults, run_scenario
from .topology import ComponentId, Topology, build_topology
from .trace import Trace, write_jsonl

log = logging.getLogger(__name__)

SLO_MS = 1000.0


# -- setup -----------------------------------------------------------------

def build_setup(cfg: PipelineConfig) -> tuple[Topology, ProbePlan, Scenario]:
    """Topology, probe plan and scenario described by ``cfg``."""
    topo = build_topology(cfg.topology)
    mon = cfg.monitors
    if mon.clients is not None:
        monitors = tuple(topo.require(c) for c in mon.clients)
    elif mon.budget is not None:
        monitors = select_monitors(topo, topo.clients, mon.budget, mon.k)
    else:
        monitors = topo.clients
    sc = cfg.scenario
    plan = plan_probes(topo, monitors, sc.interval_s, sc.window_epochs)
    if sc.faults is not None:
        faults = sc.faults
        for f in faults:
            topo.require(f.target)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x4641554C54]))
        faults = random_faults(topo, sc.mix, sc.horizon, rng)
    scenario = Scenario(sc.scenario_id, topo, sc.horizon, tuple(faults), sc.latency)
    return topo, plan, scenario


def simulate(cfg: PipelineConfig) -> tuple[Topology, ProbePlan, Trace]:
    topo, plan, scenario = build_setup(cfg)
    trace = run_scenario(scenario, plan, cfg.seed)
    trace.ground_truth["window_epochs"] = cfg.scenario.window_epochs
    return topo, plan, trace


# -- per-window analysis ---------------------------------------------------

@dataclass
class WindowResult:
    window: int
    posteriors: dict[ComponentId, HealthPosterior]
    flagged: set[ComponentId]
    diagnoses: list[Diagnosis] = field(default_factory=list)
    latency_s: float = 0.0


def _window_seed(cfg: PipelineConfig, window: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, cfg.mcmc.seed, window]).generate_state(1)[0])


def infer_windows(cfg: PipelineConfig, topo: Topology, plan: ProbePlan,
                  trace: Trace) -> list[WindowResult]:
    """Posterior health and flags per window; priors carry over between windows."""
    by_window = split_windows(trace.probes, cfg.scenario.window_epochs)
    results: list[WindowResult] = []
    priors = None
    history: list[dict[ComponentId, HealthPosterior]] = []
    for w in range(cfg.scenario.windows):
        start = time.perf_counter()
        obs = aggregate(by_window.get(w, []), plan, w, cfg.scenario.latency.slo_ms)
        graph = build_graph(topo, obs, priors)
        post = infer(graph, replace(cfg.mcmc, seed=_window_seed(cfg, w)))
        history.append(post)
        flagged = flag_unhealthy(history, cfg.flag.threshold, cfg.flag.min_windows, cfg.flag.rule)
        priors = carry_forward(post, cfg.flag.damping)
        results.append(WindowResult(w, post, flagged, latency_s=time.perf_counter() - start))
    return results


def diagnose_windows(cfg: PipelineConfig, topo: Topology, trace: Trace,
                     results: Sequence[WindowResult]) -> None:
    """Attach diagnoses to each window result in place."""
    we = cfg.scenario.window_epochs
    for r in results:
        start = time.perf_counter()
        part = trace.epoch_range(r.window * we, (r.window + 1) * we - 1)
        r.diagnoses = diagnose(r.flagged, part.metrics, part.logs, topo.components,
                               cfg.diagnosis, r.window)
        r.latency_s += time.perf_counter() - start


# -- scoring ---------------------------------------------------------------

@dataclass(frozen=True)
class ScoreReport:
    """Localization and attribution outcome of one scenario.

    Faults whose injection never degraded a probe are out of scope: they are
    counted separately and excluded from true positives and false negatives.
    A false positive is a (window, component) flag not explained by a fault
    overlapping that window.
    """

    scenario_id: str
    true_positives: int = 0
    false_negatives: int = 0
    false_positives: int = 0
    out_of_scope: int = 0
    attribution: Mapping[str, Mapping[str, int]] = field(default_factory=dict)
    missed: tuple[str, ...] = ()
    false_flags: tuple[str, ...] = ()
    window_latency_s: tuple[float, ...] = field(default=(), compare=False)

    @property
    def recall(self) -> float:
        total = self.true_positives + self.false_negatives
        return 1.0 if total == 0 else self.true_positives / total

    def to_json(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "localization": {"true_positives": self.true_positives,
                             "false_negatives": self.false_negatives,
                             "false_positives": self.false_positives,
                             "out_of_scope": self.out_of_scope, "recall": self.recall},
            "attribution": {k: dict(v) for k, v in self.attribution.items()},
            "missed": list(self.missed),
            "false_flags": list(self.false_flags),
            "window_latency_s": [round(v, 4) for v in self.window_latency_s],
            "matching_rule": "fault target, or the HA partner of a crashed server; "
                             "faults with no degraded probe are out of scope",
        }


def _matches(fault: Mapping, topo: Topology) -> set[ComponentId]:
    target = ComponentId.parse(fault["target"])
    out = {target}
    kind = FaultKind.parse(fault["kind"])
    if kind in (FaultKind.P1_FAIL_STOP, FaultKind.P2_PROCESS_CRASH):
        partner = topo.partner(target)
        if partner is not None:
            out.add(partner)
    return out


def expected_verdict(kind: FaultKind) -> Verdict:
    return Verdict.FAILURE if kind.is_failure else Verdict.OVERLOAD


def score(ground_truth: Mapping, results: Sequence[WindowResult], topo: Topology,
          window_epochs: int) -> ScoreReport:
    faults = list(ground_truth.get("faults", []))

    def window_span(w):
        return w * window_epochs, (w + 1) * window_epochs - 1

    def overlaps(f, w):
        lo, hi = window_span(w)
        return f["start"] <= hi and lo <= f["end"]

    tp = fn = oos = 0
    missed = []
    attribution: dict[str, dict[str, int]] = {
        v.value: {"correct": 0, "incorrect": 0} for v in (Verdict.FAILURE, Verdict.OVERLOAD)}
    for f in faults:
        if f.get("probes_degraded", 1) == 0:
            oos += 1
            continue
        match = _matches(f, topo)
        hit = None
        for r in results:
            if overlaps(f, r.window):
                found = sorted(match & r.flagged)
                if found:
                    hit = (r, found)
                    break
        if hit is None:
            fn += 1
            missed.append(f"{f['kind']}:{f['target']}")
            continue
        tp += 1
        r, found = hit
        want = expected_verdict(FaultKind.parse(f["kind"]))
        verdicts = {d.component: d.verdict for d in r.diagnoses}
        got = verdicts.get(ComponentId.parse(f["target"]), verdicts.get(found[0]))
        attribution[want.value]["correct" if got is want else "incorrect"] += 1

    false_flags = []
    for r in results:
        explained = set()
        for f in faults:
            if overlaps(f, r.window):
                explained |= _matches(f, topo)
        false_flags += [f"w{r.window}:{c}" for c in sorted(r.flagged - explained)]
    return ScoreReport(
        str(ground_truth.get("scenario_id", "")), tp, fn, len(false_flags), oos, attribution,
        tuple(missed), tuple(false_flags), tuple(r.latency_s for r in results))


# -- heatmaps --------------------------------------------------------------

@dataclass(frozen=True)
class HeatmapMatrix:
    """Share of probes slower than the SLO (or failed) per monitor and target."""

    window: int
    domain: int
    rows: tuple[ComponentId, ...]
    cols: tuple[ComponentId, ...]
    cells: tuple[tuple[float, ...], ...]
    totals: tuple[tuple[int, ...], ...]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["monitor"] + [str(c) for c in self.cols])
            for row, cells in zip(self.rows, self.cells):
                w.writerow([str(row)] + [f"{v:.4f}" for v in cells])


def emit_heatmap(trace: Trace, window: int, topo: Topology, window_epochs: int = 5,
                 slo_ms: float = SLO_MS) -> list[HeatmapMatrix]:
    """One matrix per filesystem domain for ``window``.

    Rows are monitors and columns the probed servers and disks of the
    domain; a cell is the fraction of that pair's probes that failed or took
    longer than ``slo_ms``.
    """
    lo, hi = window * window_epochs, (window + 1) * window_epochs - 1
    bad: dict[tuple, int] = defaultdict(int)
    total: dict[tuple, int] = defaultdict(int)
    for r in trace.probes:
        if lo <= r.epoch <= hi:
            key = (r.monitor, r.target)
            total[key] += 1
            if r.status != "ok" or r.latency_ms > slo_ms:
                bad[key] += 1
    if not total:
        raise EmptyWindowError(f"window {window} has no probe records")
    rows = tuple(sorted({m for m, _ in total}))
    targets = sorted({t for _, t in total})
    out = []
    for domain in sorted(set(topo.domains.values())):
        cols = tuple(t for t in targets if topo.domain_of(t) == domain)
        if not cols:
            continue
        cells, counts = [], []
        for m in rows:
            cells.append(tuple(bad[(m, t)] / total[(m, t)] if total[(m, t)] else 0.0 for t in cols))
            counts.append(tuple(total[(m, t)] for t in cols))
        out.append(HeatmapMatrix(window, domain, rows, cols, tuple(cells), tuple(counts)))
    return out


# -- pipeline --------------------------------------------------------------

@dataclass
class PipelineResult:
    topology: Topology
    plan: ProbePlan
    trace: Trace
    windows: list[WindowResult]
    report: ScoreReport


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Simulate, infer, diagnose and score every window of a scenario."""
    topo, plan, trace = simulate(cfg)
    results = infer_windows(cfg, topo, plan, trace)
    diagnose_windows(cfg, topo, trace, results)
    report = score(trace.ground_truth, results, topo, cfg.scenario.window_epochs)
    result = PipelineResult(topo, plan, trace, results, report)
    if out_dir is not None:
        write_outputs(result, Path(out_dir), cfg)
    return result


def posterior_rows(results: Iterable[WindowResult]) -> Iterable[dict]:
    for r in results:
        for c, p in sorted(r.posteriors.items()):
            yield dict(p.to_json(), window=r.window, flagged=c in r.flagged)


def diagnosis_rows(results: Iterable[WindowResult]) -> Iterable[dict]:
    for r in results:
        for d in r.diagnoses:
            yield d.to_json()


def write_outputs(result: PipelineResult, out: Path, cfg: PipelineConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.trace.dump(out / "trace.jsonl", out / "ground_truth.json")
    (out / "plan.json").write_text(json.dumps(result.plan.to_mapping(), indent=2))
    write_jsonl(out / "posteriors.jsonl", posterior_rows(result.windows))
    write_jsonl(out / "diagnoses.jsonl", diagnosis_rows(result.windows))
    (out / "score_report.json").write_text(json.dumps(result.report.to_json(), indent=2))
    for r in result.windows:
        for m in emit_heatmap(result.trace, r.window, result.topology,
                              cfg.scenario.window_epochs, cfg.scenario.latency.slo_ms):
            m.to_csv(out / f"heatmap_w{m.window}_d{m.domain}.csv")

"""Command-line entry point.

Each stage reads and writes files in ``--out-dir`` so stages can run one at
a time (``sim run``, ``infer``, ``diagnose``, ``score``, ``heatmap``) or all
together (``pipeline``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .diagnosis import Diagnosis, Verdict
from .errors import ForensicsError
from .harness import (WindowResult, build_setup, diagnose_windows, diagnosis_rows, emit_heatmap,
                      infer_windows, posterior_rows, run_pipeline, score, simulate)
from .inference import HealthPosterior
from .topology import ComponentId, check_identifiability
from .trace import Trace, read_jsonl, write_jsonl

log = logging.getLogger("storeforensics")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML pipeline config (defaults: CI-scale topology)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", type=Path, default=Path("out"), help="artifact directory")
    p.add_argument("--windows", type=int, help="number of 5-epoch inference windows")
    p.add_argument("--scale", choices=("ci", "petastore"), help="topology preset override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storeforensics", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    topo = sub.add_parser("topo", help="topology commands")
    topo_sub = topo.add_subparsers(dest="action", required=True)
    _common(topo_sub.add_parser("gen", help="build the topology and monitor placement"))

    sim = sub.add_parser("sim", help="simulator commands")
    sim_sub = sim.add_subparsers(dest="action", required=True)
    _common(sim_sub.add_parser("run", help="simulate a scenario and write the trace"))

    for name, text in (("infer", "posterior health per window from a trace"),
                       ("diagnose", "attribute flagged components"),
                       ("score", "score flags and verdicts against ground truth"),
                       ("heatmap", "slow-operation heatmaps per window and domain"),
                       ("pipeline", "simulate, infer, diagnose, score and plot")):
        _common(sub.add_parser(name, help=text))
    return parser


def _config(args) -> PipelineConfig:
    return load_config(args.config).with_overrides(seed=args.seed, windows=args.windows,
                                                   scale=args.scale)


def _load_trace(out: Path) -> Trace:
    path = out / "trace.jsonl"
    if not path.exists():
        raise ForensicsError(f"{path} not found; run `sim run` first")
    return Trace.load(path, out / "ground_truth.json")


def _load_windows(out: Path) -> list[WindowResult]:
    path = out / "posteriors.jsonl"
    if not path.exists():
        raise ForensicsError(f"{path} not found; run `infer` first")
    windows: dict[int, WindowResult] = {}
    for row in read_jsonl(path):
        w = row["window"]
        r = windows.setdefault(w, WindowResult(w, {}, set()))
        post = HealthPosterior.from_json(row)
        r.posteriors[post.component] = post
        if row.get("flagged"):
            r.flagged.add(post.component)
    diag = out / "diagnoses.jsonl"
    if diag.exists():
        for row in read_jsonl(diag):
            r = windows.setdefault(row["window"], WindowResult(row["window"], {}, set()))
            r.diagnoses.append(Diagnosis(ComponentId.parse(row["component"]),
                                         Verdict(row["verdict"]), window=row["window"]))
    return [windows[w] for w in sorted(windows)]


def _write_heatmaps(trace: Trace, topo, cfg: PipelineConfig, out: Path) -> list[Path]:
    paths = []
    for w in range(cfg.scenario.windows):
        for m in emit_heatmap(trace, w, topo, cfg.scenario.window_epochs,
                              cfg.scenario.latency.slo_ms):
            path = out / f"heatmap_w{m.window}_d{m.domain}.csv"
            m.to_csv(path)
            paths.append(path)
    return paths


def run(args) -> int:
    cfg = _config(args)
    out: Path = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "topo":
        topo, plan, _ = build_setup(cfg)
        ok, witness = check_identifiability(topo, plan.monitors, cfg.monitors.k)
        summary = {
            "spec": cfg.topology.to_mapping(),
            "components": len(topo.components),
            "ha_pairs": [[str(a), str(b)] for a, b in topo.ha_pairs],
            "monitors": [str(m) for m in plan.monitors],
            "probes_per_epoch": {op.value: n for op, n in sorted(plan.counts().items())},
            "identifiable": ok,
            "witness": None if witness is None else [str(witness[0]), sorted(map(str, witness[1]))],
        }
        (out / "topology.json").write_text(json.dumps(summary, indent=2))
        print(f"{len(topo.components)} components, {len(plan.monitors)} monitors, "
              f"{len(plan.probes)} probes/epoch, identifiable={ok}")
        return 0

    if cmd == "sim":
        _, plan, trace = simulate(cfg)
        trace.dump(out / "trace.jsonl", out / "ground_truth.json")
        (out / "plan.json").write_text(json.dumps(plan.to_mapping(), indent=2))
        print(f"{len(trace.probes)} probes, {len(trace.metrics)} metric samples, "
              f"{len(trace.logs)} log lines -> {out}")
        return 0

    if cmd == "pipeline":
        result = run_pipeline(cfg, out)
        rep = result.report
        print(f"TP={rep.true_positives} FN={rep.false_negatives} FP={rep.false_positives} "
              f"recall={rep.recall:.2f} -> {out}")
        return 0

    topo, plan, _ = build_setup(cfg)
    trace = _load_trace(out)
    if cmd == "infer":
        results = infer_windows(cfg, topo, plan, trace)
        write_jsonl(out / "posteriors.jsonl", posterior_rows(results))
        for r in results:
            print(f"window {r.window}: flagged {sorted(map(str, r.flagged))}")
        return 0
    if cmd == "heatmap":
        paths = _write_heatmaps(trace, topo, cfg, out)
        print(f"{len(paths)} heatmaps -> {out}")
        return 0

    results = _load_windows(out)
    if cmd == "diagnose":
        for r in results:
            r.diagnoses = []
        diagnose_windows(cfg, topo, trace, results)
        write_jsonl(out / "diagnoses.jsonl", diagnosis_rows(results))
        for r in results:
            for d in r.diagnoses:
                print(f"window {r.window}: {d.component} {d.verdict.value}")
        return 0
    if cmd == "score":
        report = score(trace.ground_truth, results, topo, cfg.scenario.window_epochs)
        (out / "score_report.json").write_text(json.dumps(report.to_json(), indent=2))
        print(f"TP={report.true_positives} FN={report.false_negatives} "
              f"FP={report.false_positives} recall={report.recall:.2f}")
        return 0
    raise AssertionError(cmd)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ForensicsError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Pipeline configuration loaded from YAML."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .diagnosis import DiagnosisConfig
from .errors import ConfigError, SpecError
from .inference import FLAG_RULES, MCMCConfig
from .simulator import FaultMix, FaultSpec, LatencyModel
from .topology import TopologySpec


@dataclass(frozen=True)
class MonitorConfig:
    """Explicit ``clients`` win; otherwise ``budget`` monitors are selected
    greedily; with neither, every client probes."""

    clients: tuple[str, ...] | None = None
    budget: int | None = None
    k: int = 1


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str = "scenario"
    windows: int = 1
    window_epochs: int = 5
    interval_s: int = 60
    faults: tuple[FaultSpec, ...] | None = None
    mix: FaultMix = field(default_factory=FaultMix)
    latency: LatencyModel = field(default_factory=LatencyModel)

    @property
    def horizon(self) -> int:
        return self.windows * self.window_epochs


@dataclass(frozen=True)
class FlagConfig:
    threshold: float = 0.9
    min_windows: int = 1
    # "upper": the whole credible interval must sit below the threshold
    rule: str = "upper"
    damping: float = 0.9

    def __post_init__(self):
        if self.rule not in FLAG_RULES:
            raise ConfigError(f"unknown flag rule {self.rule!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError("flag threshold must lie in (0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    topology: TopologySpec = field(default_factory=TopologySpec)
    monitors: MonitorConfig = field(default_factory=MonitorConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    flag: FlagConfig = field(default_factory=FlagConfig)
    diagnosis: DiagnosisConfig = field(default_factory=DiagnosisConfig)

    def with_overrides(self, *, seed: int | None = None, windows: int | None = None,
                       scale: str | None = None) -> PipelineConfig:
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if windows is not None:
            if windows < 1:
                raise ConfigError("--windows must be at least 1")
            cfg = replace(cfg, scenario=replace(cfg.scenario, windows=windows))
        if scale is not None:
            presets = {"ci": TopologySpec.ci, "petastore": TopologySpec.petastore_candidates}
            if scale not in presets:
                raise ConfigError(f"unknown scale {scale!r}")
            cfg = replace(cfg, topology=presets[scale](seed=cfg.topology.seed))
            if scale == "petastore" and cfg.monitors.clients is None and cfg.monitors.budget is None:
                cfg = replace(cfg, monitors=replace(cfg.monitors, budget=6))
        return cfg


def _build(cls, data: Mapping | None, section: str, **convert):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    for key, fn in convert.items():
        if key in data and data[key] is not None:
            data[key] = fn(data[key])
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {section} section: {exc}") from None


def config_from_mapping(data: Mapping | None) -> PipelineConfig:
    data = dict(data or {})
    allowed = {"seed", "topology", "monitors", "scenario", "inference", "diagnosis"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        topo = TopologySpec.from_mapping(data.get("topology") or {})
    except SpecError as exc:
        raise ConfigError(str(exc)) from None
    monitors = _build(MonitorConfig, data.get("monitors"), "monitors",
                      clients=lambda v: tuple(str(c) for c in v))
    sc = dict(data.get("scenario") or {})
    if "id" in sc:
        sc["scenario_id"] = str(sc.pop("id"))
    scenario = _build(
        ScenarioConfig, sc, "scenario",
        faults=lambda v: tuple(FaultSpec.from_mapping(f) for f in v),
        mix=FaultMix.from_mapping, latency=LatencyModel.from_mapping,
    )
    inf = dict(data.get("inference") or {})
    flag_keys = {"threshold": "threshold", "min_windows": "min_windows", "rule": "rule",
                 "damping": "damping"}
    flag = _build(FlagConfig, {flag_keys[k]: inf.pop(k) for k in list(inf) if k in flag_keys},
                  "inference")
    mcmc = _build(MCMCConfig, inf, "inference")
    diag = _build(DiagnosisConfig, data.get("diagnosis"), "diagnosis",
                  metrics=lambda v: tuple(v))
    return PipelineConfig(int(data.get("seed", 0)), topo, monitors, scenario, mcmc, flag, diag)


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML config; ``None`` gives the defaults (CI-scale topology)."""
    if path is None:
        return PipelineConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"config {path} must be a mapping")
    return config_from_mapping(data)

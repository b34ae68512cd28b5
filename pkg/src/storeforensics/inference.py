"""Bayesian health estimation over a factor graph of probe paths.

Every component has a health ``X`` in [0, 1] with a Beta prior.  Each path
observation contributes a Binomial factor ``Y ~ Bin(N, A)`` where the path
availability ``A`` multiplies serial healths, one ``1 - prod(1 - X)`` term
per redundancy group and the target health.  Posteriors are sampled with
Metropolis-within-Gibbs in logit space.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .errors import ConfigError, ConvergenceWarning, NotFoundError
from .monitor import PathObservation
from .topology import ComponentId, ProbePath, Topology, enumerate_paths

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HealthBelief:
    component: ComponentId
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be finite and positive, got {v}")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1))


@dataclass(frozen=True)
class HealthPosterior:
    component: ComponentId
    mean: float
    variance: float
    credible_low: float
    credible_high: float
    effective_samples: int
    rhat: float = 1.0
    observed: bool = True

    def to_json(self) -> dict:
        return {"component": str(self.component), "mean": round(self.mean, 6),
                "variance": round(self.variance, 8), "credible_low": round(self.credible_low, 6),
                "credible_high": round(self.credible_high, 6),
                "effective_samples": self.effective_samples, "rhat": round(self.rhat, 4),
                "observed": self.observed}

    @classmethod
    def from_json(cls, d: Mapping) -> HealthPosterior:
        return cls(ComponentId.parse(d["component"]), d["mean"], d["variance"], d["credible_low"],
                   d["credible_high"], d["effective_samples"], d.get("rhat", 1.0),
                   d.get("observed", True))


def path_availability(path: ProbePath, healths: Mapping[ComponentId, float]) -> float:
    """Probability that a request on ``path`` succeeds given component healths."""
    def h(c):
        try:
            return float(healths[c])
        except KeyError:
            raise NotFoundError(f"no health value for {c}") from None

    a = 1.0
    for c in path.serial_components:
        a *= h(c)
    for group in path.redundancy_groups:
        miss = 1.0
        for c in group:
            miss *= 1.0 - h(c)
        a *= 1.0 - miss
    return a * h(path.target)


@dataclass(frozen=True)
class Factor:
    """Binomial evidence ``y`` successes of ``n`` on one path."""

    path: ProbePath
    n: int
    y: int


@dataclass(frozen=True)
class FactorGraph:
    variables: Mapping[ComponentId, HealthBelief]
    factors: tuple[Factor, ...]
    unobserved: frozenset[ComponentId] = field(default=frozenset())

    @property
    def observed(self) -> tuple[ComponentId, ...]:
        return tuple(c for c in self.variables if c not in self.unobserved)


def build_graph(
    topo: Topology | None,
    observations: Iterable[PathObservation | tuple[ProbePath, int, int]],
    priors: Mapping[ComponentId, HealthBelief] | None = None,
) -> FactorGraph:
    """One Binomial factor per observation plus one Beta prior per component.

    Observations may be :class:`PathObservation` (paths are resolved against
    ``topo``) or ``(ProbePath, n, y)`` triples.  Variables cover every
    topology component plus anything named by a path or a prior; those
    without factors are marked unobserved.
    """
    priors = dict(priors or {})
    factors = []
    for obs in observations:
        if isinstance(obs, PathObservation):
            if topo is None:
                raise ConfigError("a topology is needed to resolve PathObservation paths")
            path, n, y = enumerate_paths(topo, obs.monitor, obs.target), obs.n, obs.y
        else:
            path, n, y = obs
        if n <= 0:
            log.warning("skipping observation with N=0 on %s -> %s", path.client, path.target)
            continue
        if not 0 <= y <= n:
            raise ConfigError(f"Y={y} outside 0..{n}")
        factors.append(Factor(path, int(n), int(y)))

    names: list[ComponentId] = list(topo.components) if topo is not None else []
    seen = set(names)
    for f in factors:
        for c in f.path.components:
            if c not in seen:
                seen.add(c)
                names.append(c)
    for c in priors:
        if c not in seen:
            seen.add(c)
            names.append(c)
    variables = {c: priors.get(c, HealthBelief(c)) for c in names}
    touched = {c for f in factors for c in f.path.components}
    return FactorGraph(variables, tuple(factors), frozenset(c for c in names if c not in touched))


@dataclass(frozen=True)
class MCMCConfig:
    chains: int = 4
    samples: int = 2500
    burn_in: int = 1000
    seed: int = 0
    rhat_max: float = 1.1
    credible_mass: float = 0.90
    target_accept: float = 0.44
    adapt_interval: int = 50
    block: int = 250
    # Metropolis updates per variable between recorded draws
    updates: int = 3

    def __post_init__(self):
        if self.samples < 1000:
            raise ConfigError("MCMC needs at least 1000 samples per chain")
        if self.chains < 1:
            raise ConfigError("MCMC needs at least one chain")
        if self.updates < 1:
            raise ConfigError("updates must be at least 1")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be non-negative")
        if not 0 < self.credible_mass < 1:
            raise ConfigError("credible_mass must lie in (0, 1)")


# -- compiled factor arrays ------------------------------------------------

class _Compiled:
    """Index arrays for the compiled sampler.

    Health vectors are extended by two constant slots, ``one`` (always 1) and
    ``zero`` (always 0).  Factors whose probes all succeeded are folded into
    per-variable and per-group weights; the rest are kept as padded index
    arrays (serial slots padded with ``one``, group members with ``zero``,
    absent groups made of ``one`` only).
    """

    def __init__(self, graph: FactorGraph):
        self.names = list(graph.observed)
        index = {c: i for i, c in enumerate(self.names)}
        nv = len(self.names)
        self.one, self.zero = nv, nv + 1
        clean = [f for f in graph.factors if f.y == f.n]
        dirty = [f for f in graph.factors if f.y < f.n]

        self.w_serial = np.zeros(nv)
        group_id: dict[tuple, int] = {}
        w_group: list[float] = []
        for f in clean:
            for c in f.path.serial_components + (f.path.target,):
                self.w_serial[index[c]] += f.n
            for group in f.path.redundancy_groups:
                g = group_id.setdefault(group, len(group_id))
                if g == len(w_group):
                    w_group.append(0.0)
                w_group[g] += f.n
        mmax = max((len(g) for g in group_id), default=1)
        self.members = np.full((max(len(group_id), 1), mmax), self.zero, dtype=np.intp)
        var_groups: list[list[int]] = [[] for _ in range(nv)]
        for group, g in group_id.items():
            self.members[g, :len(group)] = [index[c] for c in group]
            for c in group:
                var_groups[index[c]].append(g)
        self.w_group = np.array(w_group + [0.0] * (len(w_group) == 0))
        self.vg_ptr, self.vg_idx = _csr(var_groups)

        smax = max((len(f.path.serial_components) + 1 for f in dirty), default=1)
        gmax = max((len(f.path.redundancy_groups) for f in dirty), default=0)
        mmax = max((len(g) for f in dirty for g in f.path.redundancy_groups), default=1)
        self.serial = np.full((len(dirty), smax), self.one, dtype=np.intp)
        self.groups = np.full((len(dirty), max(gmax, 1), mmax), self.one, dtype=np.intp)
        self.n = np.array([f.n for f in dirty], dtype=float)
        self.y = np.array([f.y for f in dirty], dtype=float)
        touching: list[list[int]] = [[] for _ in range(nv)]
        for fi, f in enumerate(dirty):
            ser = [index[c] for c in f.path.serial_components] + [index[f.path.target]]
            self.serial[fi, :len(ser)] = ser
            for gi, group in enumerate(f.path.redundancy_groups):
                self.groups[fi, gi, :] = self.zero
                self.groups[fi, gi, :len(group)] = [index[c] for c in group]
            for v in set(ser) | {index[c] for g in f.path.redundancy_groups for c in g}:
                touching[v].append(fi)
        self.vf_ptr, self.vf_idx = _csr(touching)
        self.max_degree = max((len(t) for t in touching), default=0)
        self.alpha = np.array([graph.variables[c].alpha for c in self.names])
        self.beta = np.array([graph.variables[c].beta for c in self.names])


def _csr(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(rows) + 1, dtype=np.intp)
    ptr[1:] = np.cumsum([len(r) for r in rows])
    idx = np.array([i for r in rows for i in r], dtype=np.intp)
    return ptr, idx


def _split_rhat(draws: np.ndarray) -> np.ndarray:
    """Split R-hat per variable; ``draws`` has shape (chains, samples, vars)."""
    c, s, v = draws.shape
    half = s // 2
    if half < 2:
        return np.ones(v)
    parts = np.concatenate([draws[:, :half], draws[:, s - half:]], axis=0)
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean(axis=0)
    b = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * w + b / half
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / w)
    return np.where(w > 0, r, 1.0)


def _ess(draws: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    c, s, v = draws.shape
    out = np.empty(v)
    size = 1 << (2 * s - 1).bit_length()
    for lo in range(0, v, chunk):
        d = draws[:, :, lo:lo + chunk]
        centred = d - d.mean(axis=1, keepdims=True)
        spec = np.fft.rfft(centred, n=size, axis=1)
        acov = np.fft.irfft(spec * np.conj(spec), n=size, axis=1)[:, :s] / s
        chain_var = acov[:, 0] * s / (s - 1)
        w = chain_var.mean(axis=0)
        var_plus = w * (s - 1) / s
        if c > 1:
            var_plus = var_plus + d.mean(axis=1).var(axis=0, ddof=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
        for j in range(d.shape[2]):
            if not var_plus[j] > 0:
                out[lo + j] = c * s
                continue
            r = rho[:, j]
            total = 0.0
            prev = math.inf
            for t in range(0, s - 1, 2):
                pair = r[t] + r[t + 1]
                if pair < 0:
                    break
                pair = min(pair, prev)
                total += pair
                prev = pair
            tau = -1.0 + 2.0 * total
            out[lo + j] = c * s / max(tau, 1.0 / math.log10(c * s + 10))
    return out


def _run_chain(comp: _Compiled, cfg: MCMCConfig, rng: np.random.Generator) -> np.ndarray:
    nv = len(comp.names)
    # overdispersed start: uniform draws in (0.2, 0.99)
    x0 = rng.uniform(0.2, 0.99, nv)
    z = np.log(x0) - np.log1p(-x0)
    x = np.concatenate([x0, [1.0, 0.0]])
    ll = np.empty(len(comp.n))
    args = (comp.serial, comp.groups, comp.n, comp.y)
    _kernel.all_loglik(x, *args, ll)
    log_step = np.zeros(nv)
    accepted = np.zeros(nv)
    scratch = np.empty(max(comp.max_degree, 1))
    draws = np.empty((cfg.samples, nv))
    total = cfg.burn_in + cfg.samples
    it = 0
    adapt_round = 0
    while it < total:
        if it < cfg.burn_in:
            steps = min(cfg.adapt_interval, cfg.burn_in - it)
        else:
            steps = min(cfg.block, total - it)
        noise = rng.standard_normal((steps, cfg.updates, nv))
        log_u = np.log(rng.random((steps, cfg.updates, nv)))
        start = max(0, it - cfg.burn_in)
        record_from = max(0, cfg.burn_in - it)
        sink = draws[start:start + steps - min(record_from, steps)]
        accepted[:] = 0
        _kernel.sweep_block(x, z, ll, np.exp(log_step), accepted, noise, log_u, sink, record_from,
                            *args, comp.vf_ptr, comp.vf_idx, comp.alpha, comp.beta, scratch,
                            comp.w_serial, comp.members, comp.w_group, comp.vg_ptr, comp.vg_idx)
        it += steps
        if it <= cfg.burn_in:
            adapt_round += 1
            rate = accepted / (steps * cfg.updates)
            log_step += (rate - cfg.target_accept) * 2.0 / math.sqrt(adapt_round)
    return draws


def infer(graph: FactorGraph, cfg: MCMCConfig | None = None) -> dict[ComponentId, HealthPosterior]:
    """Posterior health summaries for every variable of ``graph``.

    Observed variables are sampled with component-wise Metropolis-within-
    Gibbs using logit-space Gaussian proposals whose step sizes adapt during
    burn-in.  Each chain draws from its own seeded stream.  A :class:`ConvergenceWarning` is
    issued when any split R-hat exceeds ``cfg.rhat_max``.
    """
    cfg = cfg or MCMCConfig()
    out: dict[ComponentId, HealthPosterior] = {}
    for c in graph.unobserved:
        b = graph.variables[c]
        out[c] = HealthPosterior(c, b.mean, b.variance, 0.0, 1.0, 0, 1.0, observed=False)
    comp = _Compiled(graph)
    nv = len(comp.names)
    if nv == 0:
        return {c: out[c] for c in graph.variables}

    chains = cfg.chains
    draws = np.empty((chains, cfg.samples, nv))
    seeds = np.random.SeedSequence(cfg.seed).spawn(chains)
    for ch in range(chains):
        draws[ch] = _run_chain(comp, cfg, np.random.default_rng(seeds[ch]))

    flat = draws.reshape(-1, nv)
    means = flat.mean(axis=0)
    variances = flat.var(axis=0)
    tail = (1.0 - cfg.credible_mass) / 2.0
    low, high = np.quantile(flat, [tail, 1.0 - tail], axis=0)
    rhat = _split_rhat(draws) if chains > 1 else np.ones(nv)
    ess = _ess(draws)
    worst = int(np.argmax(rhat))
    if rhat[worst] > cfg.rhat_max:
        warnings.warn(f"R-hat {rhat[worst]:.3f} for {comp.names[worst]} exceeds {cfg.rhat_max}",
                      ConvergenceWarning, stacklevel=2)
    for i, c in enumerate(comp.names):
        m = float(means[i])
        out[c] = HealthPosterior(c, m, float(variances[i]), float(min(low[i], m)),
                                 float(max(high[i], m)), int(ess[i]), float(rhat[i]))
    return {c: out[c] for c in graph.variables}


def carry_forward(posteriors: Mapping[ComponentId, HealthPosterior],
                  damping: float = 0.9) -> dict[ComponentId, HealthBelief]:
    """Priors for the next window by moment-matching each posterior to a Beta.

    The matched ``(alpha, beta)`` are shrunk toward Beta(1, 1) as
    ``1 + damping * (param - 1)`` so confidence cannot grow without bound.
    Over-dispersed or degenerate moments fall back to Beta(1, 1).
    """
    if not 0.0 <= damping <= 1.0:
        raise ConfigError("damping must lie in [0, 1]")
    out = {}
    for c, p in posteriors.items():
        a0, b0 = moment_match(p.mean, p.variance)
        out[c] = HealthBelief(c, 1.0 + damping * (a0 - 1.0), 1.0 + damping * (b0 - 1.0))
    return out


def moment_match(mean: float, variance: float) -> tuple[float, float]:
    """Beta parameters with the given mean and variance, or (1, 1) if none exist."""
    m, v = mean, variance
    if not (0.0 < m < 1.0) or not v > 0 or v >= m * (1.0 - m):
        return 1.0, 1.0
    k = m * (1.0 - m) / v - 1.0
    return m * k, (1.0 - m) * k


FLAG_RULES = ("mean", "upper")


def flag_unhealthy(
    posteriors: Mapping[ComponentId, HealthPosterior] | Sequence[Mapping[ComponentId, HealthPosterior]],
    threshold_mean: float = 0.9,
    min_windows: int = 1,
    rule: str = "mean",
) -> set[ComponentId]:
    """Components judged unhealthy in each of the latest ``min_windows`` windows.

    ``posteriors`` is one window's summaries or a history ordered oldest
    first.  With ``rule="mean"`` a component is unhealthy when its posterior
    mean is below the threshold; with ``rule="upper"`` its whole credible
    interval must be.  Unobserved components are never flagged.
    """
    if not 0.0 < threshold_mean < 1.0:
        raise ConfigError("threshold_mean must lie in (0, 1)")
    if min_windows < 1:
        raise ConfigError("min_windows must be at least 1")
    if rule not in FLAG_RULES:
        raise ConfigError(f"unknown flag rule {rule!r}; expected one of {FLAG_RULES}")
    history = [posteriors] if isinstance(posteriors, Mapping) else list(posteriors)
    if len(history) < min_windows:
        return set()

    def bad(p: HealthPosterior) -> bool:
        if not p.observed:
            return False
        value = p.mean if rule == "mean" else p.credible_high
        return value < threshold_mean

    recent = history[-min_windows:]
    flagged = {c for c, p in recent[-1].items() if bad(p)}
    for window in recent[:-1]:
        flagged = {c for c in flagged if c in window and bad(window[c])}
    return flagged

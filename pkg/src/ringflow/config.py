"""Pipeline configuration: INI sections per module, strict keys, validated on load.

Precedence is defaults, then file, then ``--set section.key=value`` overrides.
Every value is parsed according to the type of its default.
"""
from __future__ import annotations

import configparser
import hashlib
import os
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError
from .generator import GeneratorHyper
from .idm import CollectConfig, IdmRanges
from .macro import MacroDescriptor, PenaltyWeights
from .policy import PpoHyper
from .ring import ActionBounds, RingGeometry

SEED_ENV = "RINGFLOW_SEED"


@dataclass(frozen=True)
class RingSection:
    radius: float = 100.0
    n_vehicles: int = 5
    dt: float = 0.1


@dataclass(frozen=True)
class CollectSection:
    runs: int = 50
    steps: int = 1600
    limit_min: float = 11.5
    limit_max: float = 13.5
    segments_min: int = 2
    segments_max: int = 4
    spacing_jitter: float = 0.06
    init: str = "random"


@dataclass(frozen=True)
class GeneratorSection:
    iterations: int = 6000
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    k_max: int = 5
    t_max: int = 20
    init_log_std: float = -1.0
    frame_window: int = 50
    on_infeasible: str = "project"


@dataclass(frozen=True)
class PolicySection:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    micro_weight: float = 1.0
    eta: float = 0.3
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    horizon: int = 10
    episodes_per_batch: int = 16
    iterations: int = 400
    k_min: int = 1
    k_max: int = 4
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    patience: int = 100
    tol: float = 1e-3


@dataclass(frozen=True)
class EvalSection:
    ks: tuple = (1, 2, 3, 4)
    n_rollouts: int = 50
    # 0 means "to the end of the recorded run"
    steps: int = 0
    ramp_start: float = 5.0
    ramp_duration: float = 10.0
    duration: float = 60.0
    initial_gap: float = 126.0


@dataclass(frozen=True)
class Config:
    ring: RingSection = field(default_factory=RingSection)
    bounds: ActionBounds = field(default_factory=ActionBounds)
    descriptor: MacroDescriptor = field(default_factory=MacroDescriptor)
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    idm: IdmRanges = field(default_factory=IdmRanges)
    collect: CollectSection = field(default_factory=CollectSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    # -- derived stage configs --------------------------------------------------

    def collect_config(self) -> CollectConfig:
        c = self.collect
        return CollectConfig(
            n_vehicles=self.ring.n_vehicles, runs=c.runs, steps=c.steps, dt=self.ring.dt,
            geometry=RingGeometry(self.ring.radius), bounds=self.bounds, ranges=self.idm,
            limit_segments=(c.segments_min, c.segments_max), limit_range=(c.limit_min, c.limit_max),
            spacing_jitter=c.spacing_jitter, init=c.init,
        )

    def generator_hyper(self) -> GeneratorHyper:
        g = self.generator
        return GeneratorHyper(
            iterations=g.iterations, lr=g.lr, hidden=g.hidden, k_max=g.k_max, t_max=g.t_max,
            weights=self.weights, init_log_std=g.init_log_std, frame_window=g.frame_window,
            on_infeasible=g.on_infeasible,
        )

    def ppo_hyper(self) -> PpoHyper:
        p = self.policy
        kw = {f.name: getattr(p, f.name) for f in fields(p) if f.name not in ("k_min", "k_max")}
        return PpoHyper(**kw, k_range=(p.k_min, p.k_max), t_max=self.generator.t_max, weights=self.weights)

    def to_text(self) -> str:
        """Canonical INI rendering of every value; the config hash is taken over this."""
        out = []
        for sec in fields(self):
            if sec.name == "seed":
                continue
            obj = getattr(self, sec.name)
            out.append(f"[{sec.name}]")
            out += [f"{f.name} = {_render(getattr(obj, f.name))}" for f in fields(obj)]
            out.append("")
        out += ["[run]", f"seed = {self.seed}", ""]
        return "\n".join(out)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _render(x) -> str:
    if isinstance(x, tuple):
        return ",".join(_render(e) for e in x)
    return repr(x) if isinstance(x, float) else str(x)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if ".." in raw:  # inclusive integer range, e.g. 1..4
                lo, hi = raw.split("..")
                return tuple(range(int(lo), int(hi) + 1))
            inner = default[0] if default else 0.0
            return tuple(_parse(p, inner, key) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", key=key) from None


def _apply(cfg: Config, section: str, key: str, raw: str) -> Config:
    full = f"{section}.{key}"
    if section == "run":
        if key != "seed":
            raise ConfigError(f"unknown key {full}", key=full)
        return replace(cfg, seed=_parse(raw, 0, full))
    names = {f.name for f in fields(cfg)} - {"seed"}
    if section not in names:
        raise ConfigError(f"unknown section [{section}]", key=section)
    obj = getattr(cfg, section)
    fmap = {f.name: f for f in fields(obj)}
    if key not in fmap:
        raise ConfigError(f"unknown key {full}", key=full)
    value = _parse(raw, getattr(obj, key), full)
    try:
        new = replace(obj, **{key: value})
    except (ValueError, ConfigError):
        # section-level invariants (e.g. descriptor ordering) are re-checked in validate()
        new = object.__new__(type(obj))
        for f in fields(obj):
            object.__setattr__(new, f.name, value if f.name == key else getattr(obj, f.name))
    return replace(cfg, **{section: new})


def validate(cfg: Config) -> Config:
    """Check cross-field invariants; errors name the offending keys."""
    d, b = cfg.descriptor, cfg.bounds
    if not d.d_min < d.d_max:
        raise ConfigError(f"descriptor.d_min ({d.d_min}) must be below descriptor.d_max ({d.d_max})",
                          key="descriptor.d_min,descriptor.d_max")
    if not d.d_min < d.d_bar < d.d_max:
        raise ConfigError("descriptor.d_bar must lie strictly between descriptor.d_min and descriptor.d_max",
                          key="descriptor.d_bar")
    if not d.v_min < d.v_max:
        raise ConfigError("descriptor.v_min must be below descriptor.v_max", key="descriptor.v_min,descriptor.v_max")
    if not d.v_min < d.v_bar_gt < d.v_max:
        raise ConfigError("descriptor.v_bar_gt must lie inside the speed bounds", key="descriptor.v_bar_gt")
    if not b.a_min < 0 < b.a_max:
        raise ConfigError("need bounds.a_min < 0 < bounds.a_max", key="bounds.a_min,bounds.a_max")
    if not 0 < b.v_min < b.v_max:
        raise ConfigError("need 0 < bounds.v_min < bounds.v_max", key="bounds.v_min,bounds.v_max")
    if cfg.weights.lambda_v < 0 or cfg.weights.lambda_d < 0:
        raise ConfigError("penalty weights must be non-negative", key="weights.lambda_v,weights.lambda_d")
    r = cfg.ring
    if r.radius <= 0 or r.dt <= 0 or r.n_vehicles < 2:
        raise ConfigError("need ring.radius > 0, ring.dt > 0 and ring.n_vehicles >= 2", key="ring")
    cfg.idm.validate(b)
    c = cfg.collect
    if c.runs < 1 or c.steps < 2:
        raise ConfigError("need collect.runs >= 1 and collect.steps >= 2", key="collect.runs,collect.steps")
    if not (1 <= c.segments_min <= c.segments_max):
        raise ConfigError("need 1 <= collect.segments_min <= collect.segments_max", key="collect.segments_min")
    if not c.limit_min <= c.limit_max:
        raise ConfigError("collect.limit_min exceeds collect.limit_max", key="collect.limit_min,collect.limit_max")
    if c.init not in ("random", "equilibrium"):
        raise ConfigError("collect.init must be 'random' or 'equilibrium'", key="collect.init")
    g = cfg.generator
    if g.on_infeasible not in ("project", "abort"):
        raise ConfigError("generator.on_infeasible must be 'project' or 'abort'", key="generator.on_infeasible")
    if g.iterations < 0 or g.t_max < 1 or not 0 <= g.k_max <= r.n_vehicles:
        raise ConfigError("bad generator iterations, t_max or k_max", key="generator")
    p = cfg.policy
    if not 0 <= p.k_min <= p.k_max <= r.n_vehicles:
        raise ConfigError("need 0 <= policy.k_min <= policy.k_max <= ring.n_vehicles", key="policy.k_min,policy.k_max")
    if p.horizon < 1 or p.horizon >= c.steps:
        raise ConfigError("policy.horizon must be in [1, collect.steps)", key="policy.horizon")
    try:
        cfg.ppo_hyper()
    except ValueError as exc:
        raise ConfigError(f"policy: {exc}", key="policy") from exc
    e = cfg.eval
    if not e.ks or any(not 0 <= k <= r.n_vehicles for k in e.ks):
        raise ConfigError("eval.ks must be a non-empty subset of [0, n_vehicles]", key="eval.ks")
    if e.n_rollouts < 1:
        raise ConfigError("eval.n_rollouts must be positive", key="eval.n_rollouts")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative", key="run.seed")
    return cfg


def load_config(path=None, overrides=(), seed: int | None = None, env=None) -> Config:
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides.

    The seed comes from the file, then ``RINGFLOW_SEED``, then the ``seed`` argument.
    """
    cfg = Config()
    if path is not None:
        path = os.fspath(path)
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}", key=path)
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg = _apply(cfg, section, key, raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg = _apply(cfg, "run", "seed", env[SEED_ENV])
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", key=item)
        cfg = _apply(cfg, section, key, raw)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    return validate(cfg)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent named sub-stream of the master seed (collect, gen, policy, eval, scenario)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]))


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])

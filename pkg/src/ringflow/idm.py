"""Intelligent Driver Model ground truth and fully observed dataset collection."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import brentq

from .errors import CollectionError, ConfigError, InvalidGapError
from .ring import TWO_PI, ActionBounds, RingGeometry, Snapshot, SpeedLimitProfile


@dataclass(frozen=True)
class IdmParams:
    a_cap: float = 1.0
    b: float = 1.6
    v0: float = 12.5
    delta: float = 4.0
    s0: float = 3.0
    T: float = 1.5


@dataclass(frozen=True)
class IdmRanges:
    """Inclusive (lo, hi) sampling range per IDM field."""

    a_cap: tuple = (0.8, 1.2)
    b: tuple = (1.2, 2.0)
    v0: tuple = (11.5, 13.5)
    delta: tuple = (4.0, 4.0)
    s0: tuple = (2.0, 4.0)
    T: tuple = (1.2, 1.8)

    def validate(self, bounds: ActionBounds | None = None):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ConfigError(f"inverted range for {f.name}: {lo} > {hi}", key=f"idm.{f.name}")
            if lo <= 0:
                raise ConfigError(f"IDM {f.name} must be positive", key=f"idm.{f.name}")
        if bounds is not None:
            lo, hi = self.v0
            if lo < bounds.v_min or hi > bounds.v_max:
                raise ConfigError("v0 range must lie inside the speed bounds", key="idm.v0")


def idm_accel(params: IdmParams, v, gap, dv, v_desired):
    """Unclamped IDM acceleration; works elementwise on arrays.

    ``dv`` is the closing speed v_ego - v_leader.
    """
    gap = np.asarray(gap, dtype=float)
    if np.any(gap <= 0):
        raise InvalidGapError("IDM needs a strictly positive gap")
    return _idm_accel(params.a_cap, params.b, params.delta, params.s0, params.T, v, gap, dv, v_desired)


def _idm_accel(a_cap, b, delta, s0, T, v, gap, dv, v_desired):
    s_star = s0 + np.maximum(0.0, v * T + v * dv / (2.0 * np.sqrt(a_cap * b)))
    out = a_cap * (1.0 - (v / v_desired) ** delta - (s_star / gap) ** 2)
    return out if np.ndim(out) else float(out)


def sample_idm_params(rng: np.random.Generator, ranges: IdmRanges) -> IdmParams:
    ranges.validate()
    vals = {}
    for f in fields(ranges):
        lo, hi = getattr(ranges, f.name)
        vals[f.name] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    return IdmParams(**vals)


def equilibrium_speed(params: IdmParams, gap: float, v_desired: float) -> float:
    """Speed at which IDM acceleration vanishes for a fixed gap and zero closing speed."""
    f = lambda v: _idm_accel(params.a_cap, params.b, params.delta, params.s0, params.T, v, gap, 0.0, v_desired)
    if f(0.0) <= 0:
        return 0.0
    return brentq(f, 0.0, v_desired, xtol=1e-14, rtol=1e-15, maxiter=500)


@dataclass(frozen=True)
class CollectConfig:
    n_vehicles: int = 5
    runs: int = 50
    steps: int = 1600
    dt: float = 0.1
    geometry: RingGeometry = field(default_factory=RingGeometry)
    bounds: ActionBounds = field(default_factory=ActionBounds)
    ranges: IdmRanges = field(default_factory=IdmRanges)
    limit_segments: tuple = (2, 4)
    limit_range: tuple = (11.5, 13.5)
    # relative jitter of initial gaps around uniform spacing
    spacing_jitter: float = 0.06
    init: str = "random"  # or "equilibrium"
    max_placement_tries: int = 200


@dataclass(eq=False)
class Dataset:
    """Fully observed IDM runs. Arrays are shaped (runs, steps, vehicles)."""

    theta: np.ndarray
    v: np.ndarray
    u: np.ndarray
    v_limit: np.ndarray
    profiles: list
    seed: int
    dt: float
    radius: float

    @property
    def n_runs(self) -> int:
        return self.theta.shape[0]

    @property
    def n_steps(self) -> int:
        return self.theta.shape[1]

    @property
    def n_vehicles(self) -> int:
        return self.theta.shape[2]

    def snapshot(self, run: int, t: int, observed=None) -> Snapshot:
        return Snapshot(self.theta[run, t], self.v[run, t], observed)


def _random_profile(rng, cfg: CollectConfig) -> SpeedLimitProfile:
    lo, hi = cfg.limit_segments
    n = int(rng.integers(lo, hi + 1))
    starts = np.sort(rng.uniform(0.0, TWO_PI, n - 1))
    limits = rng.uniform(*cfg.limit_range, n)
    return SpeedLimitProfile((0.0, *starts.tolist()), tuple(limits.tolist()))


def _initial_state(rng, cfg: CollectConfig, params):
    n = cfg.n_vehicles
    circ = cfg.geometry.circumference
    s0_max = max(p.s0 for p in params)
    for _ in range(cfg.max_placement_tries):
        gaps = circ / n * (1.0 + rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter, n))
        gaps *= circ / gaps.sum()
        if gaps.min() > s0_max + 5.0:
            break
    else:
        raise CollectionError("could not place vehicles without overlap")
    offset = rng.uniform(0.0, TWO_PI / n)
    theta = np.mod(offset + np.concatenate([[0.0], np.cumsum(gaps)[:-1]]) / cfg.geometry.radius, TWO_PI)
    v = rng.uniform(cfg.bounds.v_min, cfg.bounds.v_max, n)
    return theta, v


def simulate_run(cfg: CollectConfig, params, profile: SpeedLimitProfile, theta, v):
    """Closed-loop IDM on the ring. Returns (theta, v, u, v_limit) arrays of shape (steps, n)."""
    b = cfg.bounds
    radius = cfg.geometry.radius
    P = {f.name: np.array([getattr(p, f.name) for p in params]) for f in fields(IdmParams)}
    theta = np.array(theta, dtype=float)
    v = np.array(v, dtype=float)
    n = theta.size
    out = {k: np.empty((cfg.steps, n)) for k in ("theta", "v", "u", "v_limit")}
    for t in range(cfg.steps):
        order = np.argsort(theta, kind="stable")
        succ = np.empty(n, dtype=int)
        succ[order] = np.roll(order, -1)
        gap = radius * np.mod(theta[succ] - theta, TWO_PI)
        if np.any(gap <= 0):
            raise CollectionError(f"collision at step {t}")
        lim = profile.at(theta)
        acc = _idm_accel(P["a_cap"], P["b"], P["delta"], P["s0"], P["T"], v, gap, v - v[succ], np.minimum(P["v0"], lim))
        acc = np.clip(acc, b.a_min, b.a_max)
        # record the acceleration that is actually realised after the speed clamp
        acc = np.clip(acc, (b.v_min - v) / cfg.dt, (b.v_max - v) / cfg.dt)
        out["theta"][t], out["v"][t], out["u"][t], out["v_limit"][t] = theta, v, acc, lim
        v = np.clip(v + acc * cfg.dt, b.v_min, b.v_max)
        theta = np.mod(theta + v * cfg.dt / radius, TWO_PI)
        theta[theta >= TWO_PI] = 0.0
    return out["theta"], out["v"], out["u"], out["v_limit"]


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xC011EC7, run_index]))


def collect_one(cfg: CollectConfig, seed: int, run_index: int):
    rng = run_rng(seed, run_index)
    profile = _random_profile(rng, cfg)
    params = [sample_idm_params(rng, cfg.ranges) for _ in range(cfg.n_vehicles)]
    if cfg.init == "equilibrium":
        theta, v = _equilibrium_state(cfg, params, profile)
    elif cfg.init == "random":
        theta, v = _initial_state(rng, cfg, params)
    else:
        raise ConfigError(f"unknown init mode {cfg.init!r}", key="collect.init")
    return profile, simulate_run(cfg, params, profile, theta, v)


def _equilibrium_state(cfg: CollectConfig, params, profile):
    if len(set(params)) != 1:
        raise ConfigError("equilibrium init needs homogeneous IDM parameters", key="collect.init")
    p = params[0]
    n = cfg.n_vehicles
    gap = cfg.geometry.circumference / n
    v_des = min(p.v0, min(profile.limits))
    v_eq = equilibrium_speed(p, gap, v_des)
    theta = np.arange(n) * TWO_PI / n
    return theta, np.full(n, v_eq)


def collect_runs(cfg: CollectConfig, seed: int) -> Dataset:
    if cfg.n_vehicles < 2:
        raise ConfigError("need at least two vehicles", key="geometry.n")
    cfg.ranges.validate(cfg.bounds)
    profiles, arrays = [], []
    for r in range(cfg.runs):
        profile, arr = collect_one(cfg, seed, r)
        profiles.append(profile)
        arrays.append(arr)
    if not arrays:
        raise CollectionError("no runs requested")
    stack = [np.stack([a[k] for a in arrays]) for k in range(4)]
    return Dataset(*stack, profiles=profiles, seed=seed, dt=cfg.dt, radius=cfg.geometry.radius)


HEADER = "run_id\tt\tvehicle_id\ttheta\tv\tu\tv_limit"


def write_dataset(dataset: Dataset, path) -> None:
    """Write the dataset TSV atomically (temp file then rename)."""
    path = os.fspath(path)
    R, T, N = dataset.theta.shape
    lines = [
        "# ringflow-dataset 1",
        f"# seed={dataset.seed} runs={R} steps={T} vehicles={N} dt={dataset.dt!r} radius={dataset.radius!r}",
    ]
    lines += [f"# profile {r} {p.to_text()}" for r, p in enumerate(dataset.profiles)]
    lines.append(HEADER)
    # tolist() yields Python floats, whose repr round-trips exactly
    th, v, u, vl = (a.tolist() for a in (dataset.theta, dataset.v, dataset.u, dataset.v_limit))
    for r in range(R):
        for t in range(T):
            for i in range(N):
                lines.append(f"{r}\t{t}\t{i}\t{th[r][t][i]!r}\t{v[r][t][i]!r}\t{u[r][t][i]!r}\t{vl[r][t][i]!r}")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_dataset(path) -> Dataset:
    path = os.fspath(path)
    meta, profiles = {}, {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                if line.strip() != HEADER:
                    raise ValueError(f"{path}: unexpected header {line.strip()!r}")
                break
            parts = line[1:].split()
            if parts and parts[0] == "profile":
                profiles[int(parts[1])] = SpeedLimitProfile.from_text(parts[2])
            elif parts and "=" in parts[0]:
                meta.update(kv.split("=", 1) for kv in parts)
        rows = np.loadtxt(fh, delimiter="\t", ndmin=2)
    R, T, N = int(meta["runs"]), int(meta["steps"]), int(meta["vehicles"])
    if rows.shape[0] != R * T * N:
        raise ValueError(f"{path}: expected {R * T * N} rows, found {rows.shape[0]}")
    order = np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0]))
    cols = rows[order][:, 3:].reshape(R, T, N, 4)
    return Dataset(
        cols[..., 0].copy(), cols[..., 1].copy(), cols[..., 2].copy(), cols[..., 3].copy(),
        profiles=[profiles[r] for r in range(R)],
        seed=int(meta["seed"]), dt=float(meta["dt"]), radius=float(meta["radius"]),
    )

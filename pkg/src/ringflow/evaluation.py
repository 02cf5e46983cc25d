"""K-sweep macroscopic alignment and leader-follower scenarios."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .generator import GeneratorModel, complete_scene
from .idm import IdmParams, _idm_accel
from .macro import MacroDescriptor, PenaltyWeights
from .policy import PolicyModel, PpoHyper, policy_act, rollout, simulate_mixed
from .ring import ActionBounds


@dataclass
class AlignmentRow:
    K: int
    mean_speed: float
    std_speed: float
    mean_gap: float
    std_gap: float
    rollouts: int
    projected: int = 0
    collisions: int = 0


ALIGNMENT_COLUMNS = ("K", "mean_speed", "std_speed", "mean_gap", "std_gap", "rollouts", "projected", "collisions")


def eval_rng(seed: int, k: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1, k, index]))


def macro_alignment(policy: PolicyModel, generator: GeneratorModel, dataset, Ks, n_rollouts: int, seed: int,
                    desc: MacroDescriptor, weights: PenaltyWeights = PenaltyWeights(), steps: int | None = None,
                    t_max: int = 20, start: int = 0):
    """Per K: complete run-start frames, simulate the mixed closed loop and pool speeds and gaps.

    Rollout i uses run ``i % n_runs`` starting at ``start`` and its own rng stream,
    so rows do not depend on evaluation order. Statistics pool every vehicle at
    every step of every rollout.
    """
    steps = dataset.n_steps - 1 - start if steps is None else steps
    if start + steps >= dataset.n_steps:
        raise ValueError("evaluation window exceeds the recorded runs")
    N = dataset.n_vehicles
    rows = []
    for k in Ks:
        if not 0 <= k <= N:
            raise ValueError(f"K={k} outside [0, {N}]")
        speeds, gaps = [], []
        projected = collisions = 0
        for i in range(n_rollouts):
            rng = eval_rng(seed, k, i)
            run = i % dataset.n_runs
            keep = np.ones(N, dtype=bool)
            if k:
                keep[rng.choice(N, size=k, replace=False)] = False
            obs_ids = np.flatnonzero(keep)
            partial = dataset.snapshot(run, start).subset(keep) if obs_ids.size else None
            comp = complete_scene(generator, partial, desc, policy.bounds, t_max, rng, n_total=N)
            projected += comp.n_projected
            sim = simulate_mixed(policy, dataset, run, start, comp.snapshot.theta, comp.snapshot.v, obs_ids,
                                 steps, rng, dataset.dt, desc, weights)
            collisions += sim["collisions"]
            speeds.append(sim["speeds"].reshape(-1))
            gaps.append(sim["gaps"].reshape(-1))
        s = np.concatenate(speeds)
        g = np.concatenate(gaps)
        rows.append(AlignmentRow(k, float(s.mean()), float(s.std()), float(g.mean()), float(g.std()),
                                 n_rollouts, projected, collisions))
    return rows


def paired_episode_reward(policies, generator: GeneratorModel, dataset, desc: MacroDescriptor, hyper: PpoHyper,
                          n_episodes: int, seed: int):
    """Mean per-step macro reward of each policy over the same training-style episodes.

    Episode i draws its frame, K and noise from one stream that is replayed for
    every policy, so differences come from the policies alone.
    """
    H = hyper.horizon
    out = []
    for model in policies:
        total = 0.0
        for i in range(n_episodes):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A1D, i]))
            run = int(rng.integers(dataset.n_runs))
            t0 = int(rng.integers(dataset.n_steps - H))
            k = int(rng.integers(hyper.k_range[0], hyper.k_range[1] + 1))
            total += float(rollout(model, generator, dataset, run, t0, k, desc, hyper, rng).rewards.mean())
        out.append(total / n_episodes)
    return out


# -- leader / follower -------------------------------------------------------------


@dataclass
class ScenarioSpec:
    leader_start: float = 11.0
    leader_end: float = 13.0
    ramp_start: float = 5.0
    ramp_duration: float = 10.0
    initial_gap: float = 126.0
    follower_speed: float | None = None  # defaults to the leader's initial speed
    duration: float = 60.0
    speed_limit: float = 13.5

    def __post_init__(self):
        if not self.initial_gap > 0:
            raise ValueError("initial gap must be positive")

    def leader_speed(self, t):
        frac = np.clip((np.asarray(t, dtype=float) - self.ramp_start) / self.ramp_duration, 0.0, 1.0)
        return self.leader_start + frac * (self.leader_end - self.leader_start)


ACCEL_SCENARIO = ScenarioSpec(11.0, 13.0)
DECEL_SCENARIO = ScenarioSpec(13.0, 11.0)

SCENARIO_IDM = IdmParams(a_cap=1.0, b=1.6, v0=12.5, delta=4.0, s0=3.0, T=1.5)


@dataclass
class ScenarioTrace:
    t: np.ndarray
    leader_v: np.ndarray
    follower_v: np.ndarray
    gap: np.ndarray
    collided: bool = False

    def quarter_means(self):
        n = self.t.size
        q = max(1, n // 4)
        return float(self.follower_v[:q].mean()), float(self.follower_v[-q:].mean())


def leader_follower(spec: ScenarioSpec, controller, dt: float, rng, bounds: ActionBounds = ActionBounds(),
                    deterministic: bool = False) -> ScenarioTrace:
    """Straight-road two-vehicle run; ``controller`` is a PolicyModel or IdmParams.

    The leader tracks its profile exactly. The follower's control is clamped to
    the action bounds and its speed to the speed bounds.
    """
    n = int(round(spec.duration / dt)) + 1
    t = np.arange(n) * dt
    lead_v = spec.leader_speed(t)
    fol_v = np.empty(n)
    gap = np.empty(n)
    x_lead, x_fol = spec.initial_gap, 0.0
    v_f = lead_v[0] if spec.follower_speed is None else spec.follower_speed
    collided = False
    for i in range(n):
        g = x_lead - x_fol
        fol_v[i], gap[i] = v_f, g
        if g <= 0:
            collided = True
        if i == n - 1:
            break
        dv = v_f - lead_v[i]
        if isinstance(controller, PolicyModel):
            obs = np.array([[v_f, spec.speed_limit, max(g, 1e-6), dv]])
            a = float(policy_act(controller, obs, rng, deterministic)[0][0])
        else:
            p = controller
            a = float(_idm_accel(p.a_cap, p.b, p.delta, p.s0, p.T, v_f, max(g, 1e-6), dv, min(p.v0, spec.speed_limit)))
        a = min(max(a, bounds.a_min), bounds.a_max)
        v_f = min(max(v_f + a * dt, bounds.v_min), bounds.v_max)
        x_fol += v_f * dt
        x_lead += lead_v[i + 1] * dt
    return ScenarioTrace(t, lead_v, fol_v, gap, collided)


# -- export ------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def export_results(rows, path, columns=None, meta: dict | None = None) -> None:
    """Tab-separated table with a header line; '#'-prefixed metadata lines come first."""
    path = os.fspath(path)
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    if isinstance(rows, ScenarioTrace):
        columns = ("t", "leader_v", "follower_v", "gap")
        data = zip(rows.t, rows.leader_v, rows.follower_v, rows.gap)
    else:
        columns = columns or ALIGNMENT_COLUMNS
        data = [[getattr(r, c) for c in columns] for r in rows]
    lines.append("\t".join(columns))
    lines += ["\t".join(_fmt(x) for x in rec) for rec in data]
    tmp = path + ".tmp"
    try:
        with open(tmp, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write results to {path}: {exc}") from exc


def read_alignment_table(path):
    rows = []
    with open(path) as fh:
        body = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header = body[0].split("\t")
    for ln in body[1:]:
        if not ln:
            continue
        rec = dict(zip(header, ln.split("\t")))
        rows.append(AlignmentRow(
            int(rec["K"]), float(rec["mean_speed"]), float(rec["std_speed"]), float(rec["mean_gap"]),
            float(rec["std_gap"]), int(rec["rollouts"]), int(rec.get("projected", 0)), int(rec.get("collisions", 0)),
        ))
    return rows

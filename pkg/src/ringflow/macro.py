"""Macroscopic descriptor, spacing/speed penalties and the bounded macro reward.

Penalty functions come in pairs: a value function and a ``*_grad`` returning the
derivative with respect to its array input (subgradient 0 at hinge kinks and at
zero dispersion).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ring import ring_gaps


@dataclass(frozen=True)
class MacroDescriptor:
    v_bar_gt: float = 12.06
    d_bar: float = 126.0
    d_min: float = 115.0
    d_max: float = 140.0
    v_min: float = 10.5
    v_max: float = 14.0

    def __post_init__(self):
        if not self.d_min < self.d_bar < self.d_max:
            raise ValueError("need d_min < d_bar < d_max")
        if not self.v_min < self.v_bar_gt < self.v_max:
            raise ValueError("need v_min < v_bar_gt < v_max")

    def as_array(self) -> np.ndarray:
        return np.array([self.v_bar_gt, self.d_bar, self.d_min, self.d_max, self.v_min, self.v_max])

    def to_text(self) -> str:
        return "\n".join(f"{k} = {getattr(self, k)!r}" for k in self.__dataclass_fields__)

    @classmethod
    def from_text(cls, text: str) -> "MacroDescriptor":
        kv = dict(
            (a.strip(), float(b)) for a, b in (ln.split("=", 1) for ln in text.splitlines() if "=" in ln)
        )
        return cls(**kv)


@dataclass(frozen=True)
class PenaltyWeights:
    lambda_v: float = 0.5
    lambda_d: float = 0.5

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_d < 0:
            raise ValueError("penalty weights must be non-negative")


def compute_descriptor(dataset, envelope: MacroDescriptor | None = None):
    """Fleet-average speed and mean gap from data; bounds come from ``envelope``.

    Returns ``(descriptor, diagnostics)`` where diagnostics holds the empirical
    extremes, which are informational only.
    """
    if dataset.theta.size == 0:
        raise ValueError("empty dataset")
    env = envelope or MacroDescriptor()
    flat_theta = dataset.theta.reshape(-1, dataset.n_vehicles)
    gaps = np.concatenate([ring_gaps(th, dataset.radius) for th in flat_theta])
    desc = MacroDescriptor(
        v_bar_gt=float(dataset.v.mean()),
        d_bar=float(gaps.mean()),
        d_min=env.d_min,
        d_max=env.d_max,
        v_min=env.v_min,
        v_max=env.v_max,
    )
    diag = {
        "speed_std": float(dataset.v.std()),
        "gap_std": float(gaps.std()),
        "gap_min": float(gaps.min()),
        "gap_max": float(gaps.max()),
        "speed_min": float(dataset.v.min()),
        "speed_max": float(dataset.v.max()),
    }
    return desc, diag


def l_speed(speeds, v_bar_gt: float) -> float:
    speeds = np.asarray(speeds, dtype=float)
    return float((speeds.mean() / v_bar_gt - 1.0) ** 2)


def l_speed_grad(speeds, v_bar_gt: float) -> np.ndarray:
    speeds = np.asarray(speeds, dtype=float)
    n = speeds.size
    return np.full(n, 2.0 * (speeds.mean() / v_bar_gt - 1.0) / (v_bar_gt * n))


def l_dist(gaps, desc: MacroDescriptor):
    """Composite spacing penalty over the affected gaps. Returns (total, breakdown)."""
    d = np.asarray(gaps, dtype=float)
    if d.size == 0:
        raise ValueError("l_dist needs at least one gap")
    parts = {
        "mean": (d.mean() / desc.d_bar - 1.0) ** 2,
        "min": np.mean((np.maximum(0.0, desc.d_min - d) / desc.d_min) ** 2),
        "max": np.mean((np.maximum(0.0, d - desc.d_max) / desc.d_max) ** 2),
        "var": d.std() / desc.d_bar,
    }
    parts = {k: float(x) for k, x in parts.items()}
    return sum(parts.values()), parts


def l_dist_grad(gaps, desc: MacroDescriptor) -> np.ndarray:
    d = np.asarray(gaps, dtype=float)
    n = d.size
    g = np.full(n, 2.0 * (d.mean() / desc.d_bar - 1.0) / (desc.d_bar * n))
    g -= 2.0 * np.maximum(0.0, desc.d_min - d) / desc.d_min**2 / n
    g += 2.0 * np.maximum(0.0, d - desc.d_max) / desc.d_max**2 / n
    std = d.std()
    if std > 0:
        g += (d - d.mean()) / (n * std * desc.d_bar)
    return g


def l_rec(predicted, reference) -> float:
    """Mean over hidden vehicles of the squared (theta, v) error."""
    p = np.asarray(predicted, dtype=float)
    r = np.asarray(reference, dtype=float)
    if p.shape != r.shape:
        raise ValueError(f"cardinality mismatch: {p.shape} vs {r.shape}")
    if p.size == 0:
        return 0.0
    p = p.reshape(p.shape[0], -1)
    r = r.reshape(r.shape[0], -1)
    return float(np.mean(np.sum((p - r) ** 2, axis=1)))


def generator_loss(speeds, affected_gaps, desc: MacroDescriptor, weights: PenaltyWeights):
    """lambda_v * L_speed + lambda_d * L_dist. Returns (loss, terms)."""
    ls = l_speed(speeds, desc.v_bar_gt)
    ld, parts = l_dist(affected_gaps, desc)
    return weights.lambda_v * ls + weights.lambda_d * ld, {"speed": ls, "dist": ld, **parts}


def generator_loss_grad(speeds, affected_gaps, desc: MacroDescriptor, weights: PenaltyWeights):
    """(dL/dspeeds, dL/dgaps)."""
    return (
        weights.lambda_v * l_speed_grad(speeds, desc.v_bar_gt),
        weights.lambda_d * l_dist_grad(affected_gaps, desc),
    )


def reward_from_penalties(ls: float, ld: float, weights: PenaltyWeights) -> float:
    return 1.0 / (1.0 + weights.lambda_v * ls + weights.lambda_d * ld)


def macro_reward(snapshot, desc: MacroDescriptor, weights: PenaltyWeights, geometry) -> float:
    """Bounded per-step reward over all gaps of the scene."""
    gaps = ring_gaps(snapshot.theta, geometry.radius)
    ls = l_speed(snapshot.v, desc.v_bar_gt)
    ld, _ = l_dist(gaps, desc)
    return reward_from_penalties(ls, ld, weights)

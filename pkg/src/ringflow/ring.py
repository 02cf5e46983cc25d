"""Ring-road geometry, microscopic state and kinematics.

Vehicles drive counter-clockwise (increasing angle). A vehicle's gap is the arc
length, centre to centre, to the next vehicle ahead in angular order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    InvalidActionError,
    InvalidSnapshotError,
    NoPrecedingVehicleError,
)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class RingGeometry:
    radius: float = 100.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    @property
    def circumference(self) -> float:
        return TWO_PI * self.radius


@dataclass(frozen=True)
class ActionBounds:
    a_min: float = -1.1
    a_max: float = 0.5
    v_min: float = 10.5
    v_max: float = 14.0

    def __post_init__(self):
        if not self.a_min < 0 < self.a_max:
            raise ValueError("need a_min < 0 < a_max")
        if not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Joint microscopic state. Arrays are copied and made read-only."""

    theta: np.ndarray
    v: np.ndarray
    observed: np.ndarray = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        v = np.array(self.v, dtype=float).reshape(-1)
        if self.observed is None:
            observed = np.ones(theta.shape, dtype=bool)
        else:
            observed = np.array(self.observed, dtype=bool).reshape(-1)
        if theta.size < 1:
            raise InvalidSnapshotError("snapshot needs at least one vehicle")
        if not (theta.shape == v.shape == observed.shape):
            raise InvalidSnapshotError("theta, v and observed must have equal length")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(v))):
            raise InvalidSnapshotError("non-finite vehicle state")
        if np.any(theta < 0) or np.any(theta >= TWO_PI):
            raise InvalidSnapshotError("theta outside [0, 2pi)")
        if np.unique(theta).size != theta.size:
            raise InvalidSnapshotError("duplicate vehicle angles")
        for arr in (theta, v, observed):
            arr.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "observed", observed)

    def __len__(self):
        return self.theta.size

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            np.array_equal(self.theta, other.theta)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.observed, other.observed)
        )

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def subset(self, mask) -> "Snapshot":
        mask = np.asarray(mask, dtype=bool)
        return Snapshot(self.theta[mask], self.v[mask], self.observed[mask])

    def sorted(self) -> "Snapshot":
        order = np.argsort(self.theta, kind="stable")
        return Snapshot(self.theta[order], self.v[order], self.observed[order])


@dataclass(frozen=True)
class SpeedLimitProfile:
    """Piecewise-constant limit over left-closed, right-open arcs."""

    starts: tuple
    limits: tuple

    def __post_init__(self):
        starts = tuple(float(s) for s in self.starts)
        limits = tuple(float(x) for x in self.limits)
        if not starts or len(starts) != len(limits):
            raise ValueError("profile needs matching, non-empty starts and limits")
        if starts[0] != 0.0:
            raise ValueError("first segment must start at angle 0")
        if any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= TWO_PI:
            raise ValueError("segment starts must be strictly increasing in [0, 2pi)")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "limits", limits)

    @classmethod
    def constant(cls, limit: float) -> "SpeedLimitProfile":
        return cls((0.0,), (limit,))

    def check_bounds(self, bounds: ActionBounds):
        for lim in self.limits:
            if not bounds.v_min <= lim <= bounds.v_max:
                raise ValueError(f"speed limit {lim} outside [{bounds.v_min}, {bounds.v_max}]")

    def at(self, theta):
        idx = np.searchsorted(np.asarray(self.starts), theta, side="right") - 1
        return np.asarray(self.limits)[idx]

    def to_text(self) -> str:
        return ",".join(f"{s!r}:{x!r}" for s, x in zip(self.starts, self.limits))

    @classmethod
    def from_text(cls, text: str) -> "SpeedLimitProfile":
        pairs = [p.split(":") for p in text.strip().split(",")]
        return cls(tuple(float(a) for a, _ in pairs), tuple(float(b) for _, b in pairs))


@dataclass(frozen=True)
class Observation:
    v: float
    v_limit: float
    d_pre: float
    dv: float

    def __post_init__(self):
        if not self.d_pre > 0:
            raise ValueError("headway must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.v_limit, self.d_pre, self.dv])


def speed_limit_at(profile: SpeedLimitProfile, theta: float) -> float:
    return float(profile.at(theta))


def successor_indices(theta: np.ndarray) -> np.ndarray:
    """Index of the vehicle directly ahead of each vehicle."""
    order = np.argsort(theta, kind="stable")
    succ = np.empty_like(order)
    succ[order] = np.roll(order, -1)
    return succ


def ring_gaps(theta: np.ndarray, radius: float) -> np.ndarray:
    """Vectorised gaps in input order; no validation."""
    succ = successor_indices(theta)
    return radius * np.mod(theta[succ] - theta, TWO_PI)


def angular_gaps(snapshot: Snapshot, geometry: RingGeometry) -> np.ndarray:
    """Gap from each vehicle (in input order) to its successor, in metres."""
    if len(snapshot) < 2:
        raise DegenerateInputError("gaps need at least two vehicles")
    return ring_gaps(snapshot.theta, geometry.radius)


def step_dynamics(
    snapshot: Snapshot,
    controls: Sequence[float],
    dt: float,
    geometry: RingGeometry,
    bounds: ActionBounds,
) -> Snapshot:
    """Semi-implicit Euler step: speed first (clamped), then angle."""
    u = np.asarray(controls, dtype=float).reshape(-1)
    if u.shape != snapshot.v.shape:
        raise InvalidActionError("one control per vehicle required")
    if not dt > 0:
        raise ValueError("dt must be positive")
    tol = 1e-12
    if np.any(u < bounds.a_min - tol) or np.any(u > bounds.a_max + tol) or not np.all(np.isfinite(u)):
        raise InvalidActionError(f"control outside [{bounds.a_min}, {bounds.a_max}]")
    v_new = np.clip(snapshot.v + u * dt, bounds.v_min, bounds.v_max)
    theta_new = np.mod(snapshot.theta + v_new * dt / geometry.radius, TWO_PI)
    # mod can round up to exactly 2pi for tiny negative inputs
    theta_new[theta_new >= TWO_PI] = 0.0
    return Snapshot(theta_new, v_new, snapshot.observed)


def observe_all(snapshot: Snapshot, geometry: RingGeometry, profile: SpeedLimitProfile) -> np.ndarray:
    """(N, 4) array of [v, v_limit, d_pre, dv] rows, in vehicle order."""
    if len(snapshot) < 2:
        raise NoPrecedingVehicleError("a single vehicle has no preceding vehicle")
    succ = successor_indices(snapshot.theta)
    d_pre = geometry.radius * np.mod(snapshot.theta[succ] - snapshot.theta, TWO_PI)
    return np.column_stack(
        [snapshot.v, profile.at(snapshot.theta), d_pre, snapshot.v - snapshot.v[succ]]
    )


def observe(snapshot: Snapshot, vehicle_index: int, geometry: RingGeometry, profile: SpeedLimitProfile) -> Observation:
    if not 0 <= vehicle_index < len(snapshot):
        raise IndexError(f"vehicle index {vehicle_index} out of range")
    row = observe_all(snapshot, geometry, profile)[vehicle_index]
    return Observation(*map(float, row))


def snapshot_to_text(snapshot: Snapshot) -> str:
    """One vehicle per line: index, theta, v, observed flag (tab separated)."""
    lines = ["index\ttheta\tv\tobserved"]
    for i, (th, v, ob) in enumerate(zip(snapshot.theta.tolist(), snapshot.v.tolist(), snapshot.observed.tolist())):
        lines.append(f"{i}\t{th!r}\t{v!r}\t{int(ob)}")
    return "\n".join(lines) + "\n"


def snapshot_from_text(text: str) -> Snapshot:
    rows = [ln.split("\t") for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if rows and rows[0][0] == "index":
        rows = rows[1:]
    rows.sort(key=lambda r: int(r[0]))
    return Snapshot(
        [float(r[1]) for r in rows], [float(r[2]) for r in rows], [r[3].strip() == "1" for r in rows]
    )

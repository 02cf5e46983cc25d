"""Stage I: autoregressive completion of hidden vehicles.

Each step targets one gap of the partial scene, and the network proposes a
(gap fraction, speed) pair through sigmoid squashing of a reparameterised
Gaussian sample. Training backpropagates the macro loss through every proposal,
including how earlier insertions shift later contexts and gap endpoints.
Inference adds the hard-constraint rejection loop with projection fallback.

A proposal is feasible when its speed is in bounds and both new sub-gaps are
either inside [d_min, d_max] or can still be split into that range by the
vehicles that remain to be inserted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidSnapshotError
from .macro import MacroDescriptor, PenaltyWeights, generator_loss, generator_loss_grad
from .neural import (
    Adam,
    DenseNet,
    clamp_log_std,
    log_std_grad_mask,
    sigmoid,
)
from .ring import TWO_PI, ActionBounds, RingGeometry, Snapshot

log = logging.getLogger(__name__)

EXTRA_FEATURES = 9


@dataclass
class GeneratorHyper:
    iterations: int = 6000
    lr: float = 1e-3
    hidden: tuple = (64, 64)
    k_max: int = 5
    t_max: int = 20
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    init_log_std: float = -1.0
    # frames are drawn from t in [0, frame_window) of each run
    frame_window: int = 50
    on_infeasible: str = "project"
    log_every: int = 500


class GeneratorModel:
    def __init__(self, n_slots: int, radius: float, hidden=(64, 64), rng=None, init_log_std=-1.0, zero=False):
        self.n_slots = int(n_slots)
        self.radius = float(radius)
        self.net = DenseNet((self.context_dim, *hidden, 2), rng=rng, zero=zero)
        self.log_std = np.full(2, float(init_log_std))

    @property
    def context_dim(self) -> int:
        return 3 * self.n_slots + EXTRA_FEATURES

    @property
    def params(self):
        return self.net.params + [self.log_std]

    def copy(self) -> "GeneratorModel":
        other = GeneratorModel(self.n_slots, self.radius, zero=True)
        other.net = self.net.copy()
        other.log_std = self.log_std.copy()
        return other


# -- scene bookkeeping -------------------------------------------------------


@dataclass
class _Scene:
    """Working scene during completion; ``var`` is the insertion step or -1."""

    theta: list
    v: list
    var: list
    exempt: list

    @classmethod
    def from_partial(cls, partial: Snapshot):
        n = len(partial) if partial is not None else 0
        th = [] if n == 0 else partial.theta.tolist()
        vv = [] if n == 0 else partial.v.tolist()
        return cls(th, vv, [-1] * n, [False] * n)

    def order(self):
        return sorted(range(len(self.theta)), key=lambda i: self.theta[i])

    def gaps(self, order, radius):
        n = len(order)
        if n == 0:
            return []
        if n == 1:
            return [TWO_PI * radius]
        return [
            radius * ((self.theta[order[(m + 1) % n]] - self.theta[order[m]]) % TWO_PI) for m in range(n)
        ]

    def constrained(self, order):
        n = len(order)
        flags = []
        for m in range(n):
            a, b = order[m], order[(m + 1) % n]
            touched = self.var[a] >= 0 or self.var[b] >= 0
            flags.append(touched and not (self.exempt[a] or self.exempt[b]))
        return flags


def _allowed_counts(gap, constrained, r, dmin, dmax):
    out = []
    for m in range(r + 1):
        if m == 0:
            if not constrained or dmin <= gap <= dmax:
                out.append(0)
        elif (m + 1) * dmin <= gap <= (m + 1) * dmax:
            out.append(m)
    return out


def _can_absorb(gaps, flags, r, dmin, dmax) -> bool:
    reach = {0}
    for g, c in zip(gaps, flags):
        allowed = _allowed_counts(g, c, r, dmin, dmax)
        reach = {s + m for s in reach for m in allowed if s + m <= r}
        if not reach:
            return False
    return r in reach


def feasible_offsets(gaps, flags, target: int, remaining_after: int, dmin: float, dmax: float):
    """Intervals of arc offsets (metres from the gap's rear vehicle) that keep the scene completable."""
    delta = gaps[target]
    others = [g for i, g in enumerate(gaps) if i != target]
    oflags = [c for i, c in enumerate(flags) if i != target]
    if len(gaps) <= 1:
        # an empty ring or a lone vehicle: the new vehicle closes the whole circle
        others, oflags = [], []
    intervals = []
    r = remaining_after
    for ma in range(r + 1):
        for mb in range(r + 1 - ma):
            if len(gaps) == 0 and mb != 0:
                continue
            if not _can_absorb(others, oflags, r - ma - mb, dmin, dmax):
                continue
            if len(gaps) == 0:
                # no neighbours yet: any angle works if the ring can take the rest
                if (ma + 1) * dmin <= delta <= (ma + 1) * dmax:
                    intervals.append((0.0, delta))
                continue
            lo = max((ma + 1) * dmin, delta - (mb + 1) * dmax)
            hi = min((ma + 1) * dmax, delta - (mb + 1) * dmin)
            if lo <= hi:
                intervals.append((lo, hi))
    intervals.sort()
    merged = []
    for lo, hi in intervals:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _choose_target(gaps, flags, remaining_after, dmin, dmax):
    """Largest gap that admits a feasible insertion, else the largest gap."""
    if not gaps:
        return 0, []
    by_size = sorted(range(len(gaps)), key=lambda i: (-gaps[i], i))
    for i in by_size:
        iv = feasible_offsets(gaps, flags, i, remaining_after, dmin, dmax)
        if iv:
            return i, iv
    return by_size[0], []


# -- context -----------------------------------------------------------------


def _context(model: GeneratorModel, scene: _Scene, order, gaps, target, remaining, desc: MacroDescriptor):
    """Feature vector and its dependence on inserted-vehicle variables."""
    N = model.n_slots
    n = len(order)
    ctx = np.zeros(model.context_dim)
    deps = []  # (feature index, 'theta'|'v', var, coefficient)
    R = model.radius
    for m in range(min(n, N)):
        k = (target + m) % n
        a = order[k]
        ctx[3 * m] = gaps[k] / desc.d_bar
        ctx[3 * m + 1] = scene.v[a] / desc.v_bar_gt
        ctx[3 * m + 2] = 1.0
        if n >= 2:
            b = order[(k + 1) % n]
            if scene.var[b] >= 0:
                deps.append((3 * m, "theta", scene.var[b], R / desc.d_bar))
            if scene.var[a] >= 0:
                deps.append((3 * m, "theta", scene.var[a], -R / desc.d_bar))
        if scene.var[a] >= 0:
            deps.append((3 * m + 1, "v", scene.var[a], 1.0 / desc.v_bar_gt))
    base = 3 * N
    ctx[base : base + 6] = desc.as_array() / np.array([10.0, 100.0, 100.0, 100.0, 10.0, 10.0])
    ctx[base + 6] = remaining / N
    ctx[base + 7] = target / N
    ctx[base + 8] = n / N
    return ctx, deps


def encode_context(model: GeneratorModel, partial: Snapshot, desc: MacroDescriptor, target_gap_index: int, remaining_k: int):
    """Context vector for a partial snapshot; ``target_gap_index`` counts gaps in ascending-angle order."""
    scene = _Scene.from_partial(partial)
    order = scene.order()
    gaps = scene.gaps(order, model.radius)
    ctx, _ = _context(model, scene, order, gaps, target_gap_index, remaining_k, desc)
    return ctx


# -- proposals -----------------------------------------------------------------


@dataclass
class Proposal:
    theta: float
    v: float
    offset: float
    fraction: float
    z: np.ndarray
    eps: np.ndarray
    cache: object


def _propose(model, ctx, eps, scene, order, gaps, target, bounds: ActionBounds):
    mean, cache = model.net.forward(ctx)
    std = np.exp(clamp_log_std(model.log_std))
    z = mean + std * eps
    f, s = sigmoid(z)
    n = len(order)
    delta = gaps[target] if n else TWO_PI * model.radius
    start = scene.theta[order[target]] if n else 0.0
    offset = min(max(f * delta, 1e-9 * delta), delta * (1 - 1e-9))
    theta = (start + offset / model.radius) % TWO_PI
    v = bounds.v_min + s * (bounds.v_max - bounds.v_min)
    return Proposal(theta, float(v), offset, float(f), z, eps, cache)


def propose(model: GeneratorModel, partial: Snapshot, desc: MacroDescriptor, bounds: ActionBounds, remaining_k: int, rng):
    """One candidate for the currently targeted gap of ``partial``."""
    scene = _Scene.from_partial(partial)
    order = scene.order()
    gaps = scene.gaps(order, model.radius)
    target, _ = _choose_target(gaps, scene.constrained(order), remaining_k - 1, desc.d_min, desc.d_max)
    ctx, _ = _context(model, scene, order, gaps, target, remaining_k, desc)
    return _propose(model, ctx, rng.standard_normal(2), scene, order, gaps, target, bounds)


# -- training ------------------------------------------------------------------


def loss_and_grad(model: GeneratorModel, partial: Snapshot, n_total: int, desc: MacroDescriptor,
                  weights: PenaltyWeights, bounds: ActionBounds, eps):
    """Complete without rejection using the given noise; return (loss, terms, param grads, snapshot).

    ``eps`` has shape (K, 2) with K = n_total - len(partial).
    """
    scene = _Scene.from_partial(partial)
    K = n_total - len(scene.theta)
    records = []
    for s in range(K):
        order = scene.order()
        gaps = scene.gaps(order, model.radius)
        target, _ = _choose_target(gaps, scene.constrained(order), K - s - 1, desc.d_min, desc.d_max)
        ctx, deps = _context(model, scene, order, gaps, target, K - s, desc)
        prop = _propose(model, ctx, np.asarray(eps[s], dtype=float), scene, order, gaps, target, bounds)
        n = len(order)
        a = order[target] if n else None
        b = order[(target + 1) % n] if n >= 2 else None
        records.append((prop, deps, a, b, n, gaps[target] if n else TWO_PI * model.radius))
        scene.theta.append(prop.theta)
        scene.v.append(prop.v)
        scene.var.append(s)
        scene.exempt.append(False)

    order = scene.order()
    gaps = np.array(scene.gaps(order, model.radius))
    n = len(order)
    affected = sorted({m for p, i in enumerate(order) if scene.var[i] >= 0 for m in (p, (p - 1) % n)})
    if not affected:
        affected = list(range(n))
    speeds = np.array(scene.v)
    loss, terms = generator_loss(speeds, gaps[affected], desc, weights)
    completed = Snapshot(scene.theta, scene.v, [x < 0 for x in scene.var])
    grads = [np.zeros_like(p) for p in model.params]
    if K == 0:
        return loss, terms, grads, completed

    d_speed, d_gap_aff = generator_loss_grad(speeds, gaps[affected], desc, weights)
    dth = np.zeros(len(scene.theta))
    dv = d_speed.copy()
    R = model.radius
    for g, m in zip(d_gap_aff, affected):
        dth[order[(m + 1) % n]] += R * g
        dth[order[m]] -= R * g
    idx_of_var = {scene.var[i]: i for i in range(len(scene.var)) if scene.var[i] >= 0}

    span = bounds.v_max - bounds.v_min
    std = np.exp(clamp_log_std(model.log_std))
    mask = log_std_grad_mask(model.log_std)
    for s in range(K - 1, -1, -1):
        prop, deps, a, b, n_before, delta = records[s]
        i = idx_of_var[s]
        d_theta, d_v = dth[i], dv[i]
        f = prop.fraction
        sv = sigmoid(prop.z[1])
        dz = np.array([d_theta * (delta / R) * f * (1 - f), d_v * span * sv * (1 - sv)])
        if a is not None:
            dth[a] += d_theta
            if b is not None and b != a:
                d_delta = d_theta * f / R
                dth[b] += d_delta * R
                dth[a] -= d_delta * R
        net_grads, dctx = model.net.backward(prop.cache, dz)
        for gacc, gnew in zip(grads, net_grads):
            gacc += gnew
        grads[-1] += dz * prop.eps * std * mask
        for feat, kind, var, coef in deps:
            j = idx_of_var[var]
            if kind == "theta":
                dth[j] += coef * dctx[feat]
            else:
                dv[j] += coef * dctx[feat]
    return loss, terms, grads, completed


def sample_frame(dataset, window: int, rng):
    run = int(rng.integers(dataset.n_runs))
    t = int(rng.integers(min(window, dataset.n_steps)))
    return run, t


def hide(snapshot: Snapshot, k: int, rng) -> Snapshot:
    """Keep a uniformly chosen subset of len - k vehicles as the observed part."""
    n = len(snapshot)
    keep = np.ones(n, dtype=bool)
    if k:
        keep[rng.choice(n, size=k, replace=False)] = False
    return Snapshot(snapshot.theta[keep], snapshot.v[keep]) if keep.any() else None


def train_generator(dataset, desc: MacroDescriptor, hyper: GeneratorHyper, rng, bounds=ActionBounds()):
    """Alg.-1 style loop: one frame per iteration, random hidden subset, one Adam step.

    Returns (model, curve) where curve is a list of (iteration, loss).
    """
    if dataset is None or dataset.n_runs == 0 or dataset.n_steps == 0:
        raise ValueError("empty dataset")
    N = dataset.n_vehicles
    model = GeneratorModel(N, dataset.radius, hyper.hidden, rng=rng, init_log_std=hyper.init_log_std)
    opt = Adam(model.params, lr=hyper.lr)
    curve = []
    k_max = min(hyper.k_max, N)
    for it in range(hyper.iterations):
        run, t = sample_frame(dataset, hyper.frame_window, rng)
        k = int(rng.integers(0, k_max + 1))
        partial = hide(dataset.snapshot(run, t), k, rng)
        eps = rng.standard_normal((k, 2))
        loss, _, grads, _ = loss_and_grad(model, partial, N, desc, hyper.weights, bounds, eps)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite generator loss at iteration {it}")
        curve.append((it, loss))
        if k:
            opt.step(model.params, grads)
            model.net.touch()
        if hyper.log_every and (it + 1) % hyper.log_every == 0:
            recent = np.mean([c[1] for c in curve[-hyper.log_every :]])
            log.info("generator iter %d  mean loss %.5f", it + 1, recent)
    return model, curve


# -- inference -----------------------------------------------------------------


@dataclass
class Completion:
    snapshot: Snapshot
    inserted: np.ndarray  # bool per output vehicle
    projected: np.ndarray  # bool per output vehicle
    trials: list
    aborted: bool = False

    @property
    def n_projected(self) -> int:
        return int(self.projected.sum())


def _project(offset, intervals, delta, dmin):
    if intervals:
        best = min(intervals, key=lambda iv: 0.0 if iv[0] <= offset <= iv[1] else min(abs(offset - iv[0]), abs(offset - iv[1])))
        lo, hi = best
        return min(max(offset, lo), hi), True
    if delta >= 2 * dmin:
        return min(max(offset, dmin), delta - dmin), False
    return 0.5 * delta, False


def complete_scene(model: GeneratorModel, partial: Snapshot | None, desc: MacroDescriptor, bounds: ActionBounds,
                   t_max: int, rng, n_total: int | None = None, on_infeasible: str = "project") -> Completion:
    """Insert hidden vehicles one at a time with rejection; observed vehicles are kept as given."""
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    if on_infeasible not in ("project", "abort"):
        raise ValueError(f"on_infeasible must be 'project' or 'abort', got {on_infeasible!r}")
    n_total = model.n_slots if n_total is None else n_total
    n_obs = 0 if partial is None else len(partial)
    K = n_total - n_obs
    if K < 0:
        raise InvalidSnapshotError("more observed vehicles than the scene holds")
    if K == 0:
        return Completion(partial, np.zeros(n_obs, bool), np.zeros(n_obs, bool), [])
    scene = _Scene.from_partial(partial)
    projected, trials = [], []
    aborted = False
    R = model.radius
    for s in range(K):
        order = scene.order()
        gaps = scene.gaps(order, R)
        flags = scene.constrained(order)
        target, intervals = _choose_target(gaps, flags, K - s - 1, desc.d_min, desc.d_max)
        ctx, _ = _context(model, scene, order, gaps, target, K - s, desc)
        n = len(order)
        delta = gaps[target] if n else TWO_PI * R
        start = scene.theta[order[target]] if n else 0.0
        accepted = None
        for trial in range(t_max):
            prop = _propose(model, ctx, rng.standard_normal(2), scene, order, gaps, target, bounds)
            ok_v = bounds.v_min <= prop.v <= bounds.v_max
            if ok_v and any(lo <= prop.offset <= hi for lo, hi in intervals):
                accepted = prop
                break
        trials.append(trial + 1)
        if accepted is not None:
            scene.theta.append(accepted.theta)
            scene.v.append(accepted.v)
            exempt = False
            projected.append(False)
        else:
            if on_infeasible == "abort":
                aborted = True
                break
            offset, feasible = _project(prop.offset, intervals, delta, desc.d_min)
            theta = (start + offset / R) % TWO_PI
            scene.theta.append(theta)
            scene.v.append(min(max(prop.v, bounds.v_min), bounds.v_max))
            exempt = not feasible
            projected.append(True)
        scene.var.append(s)
        scene.exempt.append(exempt)
    n_ins = len(projected)
    inserted = np.array([False] * n_obs + [True] * n_ins)
    snap = Snapshot(scene.theta, scene.v, ~inserted)
    return Completion(snap, inserted, np.array([False] * n_obs + projected), trials, aborted)

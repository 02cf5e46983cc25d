"""Stage II: shared actor-critic trained with PPO on generator-completed scenes.

Actions are squashed into [a_min, a_max] with a scaled sigmoid. The clipped
surrogate runs on the macro reward stream (eta * r_macro,t), while the
log-likelihood of the instrumented vehicles' recorded actions enters the loss
directly as a behaviour-cloning term.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError
from .generator import GeneratorModel, complete_scene, hide
from .macro import MacroDescriptor, PenaltyWeights, l_dist, l_speed, reward_from_penalties
from .neural import (
    LOG_SQRT_2PI,
    Adam,
    DenseNet,
    clamp_log_std,
    log_sigmoid_deriv,
    log_std_grad_mask,
    logit,
    sigmoid,
)
from .ring import TWO_PI, ActionBounds, ring_gaps, successor_indices

log = logging.getLogger(__name__)

OBS_SHIFT = np.array([12.25, 12.5, 126.0, 0.0])
OBS_SCALE = np.array([1.75, 1.0, 40.0, 1.5])
# recorded actions sitting exactly on a bound are pulled inside by this fraction of the range
ACTION_EDGE = 1e-3


@dataclass
class PpoHyper:
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
    k_range: tuple = (1, 4)
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    # convergence: stop when the windowed mean of J fails to improve by tol over `patience` iterations
    patience: int = 100
    tol: float = 1e-3
    t_max: int = 20
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip ratio must be in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must be in (0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


class PolicyModel:
    def __init__(self, bounds: ActionBounds = ActionBounds(), hidden=(64, 64), rng=None, init_log_std=-0.5, zero=False):
        self.bounds = bounds
        self.actor = DenseNet((4, *hidden, 1), rng=rng, zero=zero)
        self.critic = DenseNet((4, *hidden, 1), rng=rng, zero=zero)
        self.log_std = np.array([float(init_log_std)])

    @property
    def params(self):
        return self.actor.params + [self.log_std] + self.critic.params

    def touch(self):
        self.actor.touch()
        self.critic.touch()

    def copy(self) -> "PolicyModel":
        other = PolicyModel(self.bounds, zero=True)
        other.actor, other.critic = self.actor.copy(), self.critic.copy()
        other.log_std = self.log_std.copy()
        return other

    @property
    def std(self) -> float:
        return float(np.exp(clamp_log_std(self.log_std))[0])

    def features(self, obs):
        return (np.asarray(obs, dtype=float) - OBS_SHIFT) / OBS_SCALE

    def mean(self, obs):
        x = self.features(obs)
        return self.actor(x)[..., 0]

    def value(self, obs):
        return self.critic(self.features(obs))[..., 0]

    # squashing between pre-activation z and physical acceleration
    def squash(self, z):
        b = self.bounds
        return b.a_min + (b.a_max - b.a_min) * sigmoid(z)

    def unsquash(self, a):
        b = self.bounds
        frac = (np.asarray(a, dtype=float) - b.a_min) / (b.a_max - b.a_min)
        return logit(np.clip(frac, ACTION_EDGE, 1.0 - ACTION_EDGE))

    def log_det(self, z):
        """log |d action / d z|."""
        return math.log(self.bounds.a_max - self.bounds.a_min) + log_sigmoid_deriv(z)

    def log_prob(self, obs, action):
        """Squash-corrected log density of physical actions."""
        z = self.unsquash(action)
        mu = self.mean(obs)
        return _gauss_logp(z, mu, clamp_log_std(self.log_std)[0]) - self.log_det(z)


def _gauss_logp(z, mu, log_std):
    return -0.5 * ((z - mu) / np.exp(log_std)) ** 2 - log_std - LOG_SQRT_2PI


def policy_act(model: PolicyModel, obs, rng, deterministic: bool = False):
    """Sample actions for a batch of observations.

    Returns (action, log_prob, value, z) with z the pre-squash sample.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    x = model.features(obs)
    mu = model.actor(x)[:, 0]
    value = model.critic(x)[:, 0]
    ls = clamp_log_std(model.log_std)[0]
    z = mu if deterministic else mu + np.exp(ls) * rng.standard_normal(mu.shape)
    action = model.squash(z)
    logp = _gauss_logp(z, mu, ls) - model.log_det(z)
    return action, logp, value, z


# -- rollouts --------------------------------------------------------------------


@dataclass
class Episode:
    """One rollout. Transition arrays are shaped (H, n_hidden)."""

    obs: np.ndarray
    z: np.ndarray
    logp_gauss: np.ndarray
    value: np.ndarray
    action: np.ndarray
    rewards: np.ndarray  # (H,) eta-free macro reward r_macro,t
    bootstrap: np.ndarray  # (n_hidden,)
    micro_obs: np.ndarray  # (P, 4)
    micro_u: np.ndarray  # (P,)
    run: int = 0
    t0: int = 0
    k: int = 0
    projected: int = 0

    @property
    def n_transitions(self) -> int:
        return self.z.size


def _gt_observations(dataset, run, t):
    th = dataset.theta[run, t]
    v = dataset.v[run, t]
    succ = successor_indices(th)
    d = dataset.radius * np.mod(th[succ] - th, TWO_PI)
    return np.column_stack([v, dataset.v_limit[run, t], d, v - v[succ]])


def simulate_mixed(model: PolicyModel, dataset, run: int, t0: int, theta, v, obs_ids, steps: int, rng,
                   dt: float, desc: MacroDescriptor, weights: PenaltyWeights, record: bool = True,
                   deterministic: bool = False):
    """Closed loop: vehicles 0..len(obs_ids)-1 replay ground truth, the rest follow the policy.

    Returns a dict of per-step arrays; speeds/gaps are recorded for the
    post-step scene, matching the macro reward.
    """
    b = model.bounds
    profile = dataset.profiles[run]
    theta = np.array(theta, dtype=float)
    v = np.array(v, dtype=float)
    n_obs = len(obs_ids)
    hid = np.arange(n_obs, theta.size)
    nh = hid.size
    out = {
        "obs": np.empty((steps, nh, 4)), "z": np.empty((steps, nh)), "logp": np.empty((steps, nh)),
        "value": np.empty((steps, nh)), "action": np.empty((steps, nh)), "reward": np.empty(steps),
        "speeds": np.empty((steps, theta.size)), "gaps": np.empty((steps, theta.size)),
        "collisions": 0,
    }
    radius = dataset.radius
    for k in range(steps):
        if nh:
            succ = successor_indices(theta)
            d_pre = radius * np.mod(theta[succ] - theta, TWO_PI)
            obs = np.column_stack([v, profile.at(theta), d_pre, v - v[succ]])[hid]
            act, logp, val, z = policy_act(model, obs, rng, deterministic)
            out["obs"][k], out["z"][k], out["logp"][k], out["value"][k], out["action"][k] = obs, z, logp, val, act
            order_before = np.argsort(theta, kind="stable")
            v_h = np.clip(v[hid] + act * dt, b.v_min, b.v_max)
            v[hid] = v_h
            theta[hid] = np.mod(theta[hid] + v_h * dt / radius, TWO_PI)
        if n_obs:
            theta[:n_obs] = dataset.theta[run, t0 + k + 1, obs_ids]
            v[:n_obs] = dataset.v[run, t0 + k + 1, obs_ids]
        if nh:
            # a change in cyclic order means someone drove through the vehicle ahead
            order_after = np.argsort(theta, kind="stable")
            if not _same_cycle(order_before, order_after):
                out["collisions"] += 1
        gaps = ring_gaps(theta, radius)
        out["speeds"][k], out["gaps"][k] = v, gaps
        ls = l_speed(v, desc.v_bar_gt)
        ld, _ = l_dist(gaps, desc)
        out["reward"][k] = reward_from_penalties(ls, ld, weights)
    out["theta"], out["v"] = theta, v
    return out


def _same_cycle(a, b) -> bool:
    if a.size < 3:
        return True
    shift = int(np.flatnonzero(b == a[0])[0])
    return np.array_equal(np.roll(b, -shift), a)


def rollout(model: PolicyModel, generator: GeneratorModel, dataset, run: int, t0: int, k: int,
            desc: MacroDescriptor, hyper: PpoHyper, rng) -> Episode:
    """Complete the frame at (run, t0) with k hidden vehicles and roll out hyper.horizon steps."""
    H = hyper.horizon
    if t0 + H >= dataset.n_steps:
        raise ValueError(f"frame at t={t0} is too short for horizon {H}")
    N = dataset.n_vehicles
    keep = np.ones(N, dtype=bool)
    if k:
        keep[rng.choice(N, size=k, replace=False)] = False
    obs_ids = np.flatnonzero(keep)
    full = dataset.snapshot(run, t0)
    partial = full.subset(keep) if obs_ids.size else None
    comp = complete_scene(generator, partial, desc, model.bounds, hyper.t_max, rng, n_total=N)
    snap = comp.snapshot
    sim = simulate_mixed(model, dataset, run, t0, snap.theta, snap.v, obs_ids, H, rng, dataset.dt, desc, hyper.weights)
    n_obs = obs_ids.size
    nh = N - n_obs
    if nh:
        succ = successor_indices(sim["theta"])
        d = dataset.radius * np.mod(sim["theta"][succ] - sim["theta"], TWO_PI)
        last_obs = np.column_stack([sim["v"], dataset.profiles[run].at(sim["theta"]), d, sim["v"] - sim["v"][succ]])
        bootstrap = model.value(last_obs[n_obs:])
    else:
        bootstrap = np.zeros(0)
    micro_obs = np.concatenate([_gt_observations(dataset, run, t0 + j)[obs_ids] for j in range(H)]) if n_obs else np.zeros((0, 4))
    micro_u = dataset.u[run, t0 : t0 + H][:, obs_ids].reshape(-1)
    logp_gauss = sim["logp"] + model.log_det(sim["z"])
    return Episode(
        obs=sim["obs"], z=sim["z"], logp_gauss=logp_gauss, value=sim["value"], action=sim["action"],
        rewards=sim["reward"], bootstrap=np.atleast_1d(bootstrap), micro_obs=micro_obs, micro_u=micro_u,
        run=run, t0=t0, k=k, projected=comp.n_projected,
    )


# -- advantage estimation --------------------------------------------------------


def gae(rewards, values, bootstrap_value, gamma: float, lam: float):
    """Generalised advantage estimation along axis 0; returns (advantages, returns)."""
    r = np.asarray(rewards, dtype=float)
    V = np.asarray(values, dtype=float)
    if r.shape != V.shape:
        raise ValueError("rewards and values must have equal shape")
    adv = np.zeros_like(V)
    nxt_v = np.asarray(bootstrap_value, dtype=float)
    running = np.zeros_like(nxt_v, dtype=float)
    for t in range(r.shape[0] - 1, -1, -1):
        delta = r[t] + gamma * nxt_v - V[t]
        running = delta + gamma * lam * running
        adv[t] = running
        nxt_v = V[t]
    return adv, adv + V


# -- PPO -------------------------------------------------------------------------


@dataclass
class TrajectoryBatch:
    obs: np.ndarray
    z: np.ndarray
    logp_old: np.ndarray  # Gaussian part only; the squash term cancels in ratios
    advantages: np.ndarray
    returns: np.ndarray
    micro_obs: np.ndarray
    micro_z: np.ndarray
    episodes: list

    @property
    def size(self) -> int:
        return self.z.size


def build_batch(model: PolicyModel, episodes, hyper: PpoHyper) -> TrajectoryBatch:
    obs, z, lp, adv, ret = [], [], [], [], []
    for ep in episodes:
        if ep.n_transitions == 0:
            continue
        rew = hyper.eta * np.repeat(ep.rewards[:, None], ep.z.shape[1], axis=1)
        a, r = gae(rew, ep.value, ep.bootstrap, hyper.gamma, hyper.lam)
        obs.append(ep.obs.reshape(-1, 4))
        z.append(ep.z.reshape(-1))
        lp.append(ep.logp_gauss.reshape(-1))
        adv.append(a.reshape(-1))
        ret.append(r.reshape(-1))
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    micro_obs = cat([ep.micro_obs for ep in episodes], (0, 4))
    micro_u = cat([ep.micro_u for ep in episodes], (0,))
    return TrajectoryBatch(
        cat(obs, (0, 4)), cat(z, (0,)), cat(lp, (0,)), cat(adv, (0,)), cat(ret, (0,)),
        micro_obs, model.unsquash(micro_u), list(episodes),
    )


def clipped_surrogate(ratio, adv, clip: float):
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def surrogate_grad_wrt_logp(ratio, adv, clip: float):
    """d/d(log pi) of the clipped surrogate; zero on the clipped branch."""
    clipped = ((adv >= 0) & (ratio > 1.0 + clip)) | ((adv < 0) & (ratio < 1.0 - clip))
    return np.where(clipped, 0.0, ratio * adv)


def ppo_loss_and_grads(model: PolicyModel, obs, z, logp_old, adv, ret, micro_obs, micro_z, hyper: PpoHyper):
    """Total loss (to minimise) and gradients in ``model.params`` order."""
    ls_raw = model.log_std
    ls = clamp_log_std(ls_raw)[0]
    sigma = math.exp(ls)
    grads_actor = [np.zeros_like(p) for p in model.actor.params]
    grads_critic = [np.zeros_like(p) for p in model.critic.params]
    d_ls = 0.0
    stats = {}
    M = z.size
    loss = 0.0
    if M:
        x = model.features(obs)
        mu, cache_a = model.actor.forward(x)
        mu = mu[:, 0]
        V, cache_c = model.critic.forward(x)
        V = V[:, 0]
        logp = _gauss_logp(z, mu, ls)
        ratio = np.exp(logp - logp_old)
        surr = clipped_surrogate(ratio, adv, hyper.clip)
        g_logp = -surrogate_grad_wrt_logp(ratio, adv, hyper.clip) / M
        v_err = V - ret
        entropy = ls + 0.5 + LOG_SQRT_2PI
        loss += -surr.mean() + hyper.value_coef * np.mean(v_err**2) - hyper.entropy_coef * entropy
        d_mu = g_logp * (z - mu) / sigma**2
        d_ls += float(np.sum(g_logp * (((z - mu) / sigma) ** 2 - 1.0))) - hyper.entropy_coef
        ga, _ = model.actor.backward(cache_a, d_mu[:, None])
        grads_actor = [g + h for g, h in zip(grads_actor, ga)]
        gc, _ = model.critic.backward(cache_c, (2.0 * hyper.value_coef * v_err / M)[:, None])
        grads_critic = gc
        stats.update(
            surrogate=float(surr.mean()), value_loss=float(np.mean(v_err**2)),
            clip_frac=float(np.mean(np.abs(ratio - 1.0) > hyper.clip)),
            approx_kl=float(np.mean(logp_old - logp)),
        )
    P = micro_z.size
    if P and hyper.micro_weight:
        mu_m, cache_m = model.actor.forward(model.features(micro_obs))
        mu_m = mu_m[:, 0]
        ll = _gauss_logp(micro_z, mu_m, ls)
        loss += -hyper.micro_weight * ll.mean()
        w = hyper.micro_weight / P
        d_mu_m = -w * (micro_z - mu_m) / sigma**2
        d_ls += float(-w * np.sum(((micro_z - mu_m) / sigma) ** 2 - 1.0))
        gm, _ = model.actor.backward(cache_m, d_mu_m[:, None])
        grads_actor = [g + h for g, h in zip(grads_actor, gm)]
        stats["micro_ll"] = float(ll.mean())
    d_log_std = np.array([d_ls]) * log_std_grad_mask(ls_raw)
    return float(loss), grads_actor + [d_log_std] + grads_critic, stats


def ppo_update(model: PolicyModel, batch: TrajectoryBatch, hyper: PpoHyper, opt: Adam, rng) -> dict:
    M, P = batch.size, batch.micro_z.size
    if M == 0 and P == 0:
        raise ValueError("empty batch")
    adv = batch.advantages
    if M:
        adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    n_mb = max(1, int(math.ceil(M / hyper.minibatch))) if M else max(1, int(math.ceil(P / hyper.minibatch)))
    totals = {}
    count = 0
    for _ in range(hyper.epochs):
        perm = rng.permutation(M)
        perm_m = rng.permutation(P)
        for j in range(n_mb):
            idx = perm[j::n_mb]
            idm = perm_m[j::n_mb]
            loss, grads, stats = ppo_loss_and_grads(
                model, batch.obs[idx], batch.z[idx], batch.logp_old[idx], adv[idx], batch.returns[idx],
                batch.micro_obs[idm], batch.micro_z[idm], hyper,
            )
            if not np.isfinite(loss):
                raise DivergenceError("non-finite PPO loss")
            opt.step(model.params, grads)
            model.touch()
            stats["loss"] = loss
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            count += 1
    return {key: val / count for key, val in totals.items()}


def episode_score(model: PolicyModel, ep: Episode, eta: float):
    """(r_micro, r_macro) for one episode under the current policy."""
    micro = float(np.sum(model.log_prob(ep.micro_obs, ep.micro_u))) if ep.micro_u.size else 0.0
    return micro, float(np.sum(ep.rewards))


def collect_batch(model, generator, dataset, desc, hyper: PpoHyper, rng):
    episodes = []
    H = hyper.horizon
    for _ in range(hyper.episodes_per_batch):
        run = int(rng.integers(dataset.n_runs))
        t0 = int(rng.integers(dataset.n_steps - H))
        k = int(rng.integers(hyper.k_range[0], hyper.k_range[1] + 1))
        episodes.append(rollout(model, generator, dataset, run, t0, k, desc, hyper, rng))
    return episodes


def train_policy(dataset, generator: GeneratorModel, desc: MacroDescriptor, hyper: PpoHyper, rng,
                 bounds: ActionBounds = ActionBounds()):
    """PPO loop with early stopping on the windowed objective. Returns (model, curve).

    ``curve`` rows: iteration, J, micro log-likelihood per episode, mean macro reward,
    clip fraction, approximate KL. Row 0 is the untrained baseline.
    """
    model = PolicyModel(bounds, hyper.hidden, rng=rng, init_log_std=hyper.init_log_std)
    opt = Adam(model.params, lr=hyper.lr, max_grad_norm=hyper.max_grad_norm)
    curve = []
    best = -np.inf
    since_best = 0
    for it in range(hyper.iterations):
        episodes = collect_batch(model, generator, dataset, desc, hyper, rng)
        scores = [episode_score(model, ep, hyper.eta) for ep in episodes]
        micro = float(np.mean([s[0] for s in scores]))
        macro_sum = float(np.mean([s[1] for s in scores]))
        J = micro + hyper.eta * macro_sum
        mean_reward = float(np.mean([ep.rewards.mean() for ep in episodes]))
        batch = build_batch(model, episodes, hyper)
        stats = ppo_update(model, batch, hyper, opt, rng)
        curve.append((it, J, micro, mean_reward, stats.get("clip_frac", 0.0), stats.get("approx_kl", 0.0)))
        if it % 25 == 0:
            log.info("policy iter %d  J %.3f  micro %.3f  macro %.4f", it, J, micro, mean_reward)
        w = min(len(curve), hyper.patience // 4 or 1)
        windowed = float(np.mean([c[1] for c in curve[-w:]]))
        if windowed > best + hyper.tol:
            best, since_best = windowed, 0
        else:
            since_best += 1
            if since_best >= hyper.patience:
                log.info("policy converged at iteration %d", it)
                break
    return model, curve

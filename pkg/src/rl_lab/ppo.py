"""Clipped-surrogate PPO baseline (likelihood-ratio gradients, no simulator tapes)."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .diffsim import LaneSet
from .nets import CriticNet, PolicyNet
from .optim import AdamState, adam_step, clip_grad_norm
from .robust import NoiseSpec, eval_policy

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    rollout_steps: int = 64
    n_lanes: int = 32
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatch_count: int = 4
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    entropy_coef: float = 1e-3
    total_env_steps: int = 256_000
    grad_clip: float = 1.0
    hidden: tuple = (64, 64)
    eval_every: int = 2
    eval_rollouts: int = 16

    def __post_init__(self):
        if not self.clip_ratio > 0:
            raise ValueError("clip_ratio must be > 0")
        if self.total_env_steps < self.n_lanes * self.rollout_steps:
            raise ValueError("total_env_steps must cover at least one rollout")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        self.hidden = tuple(self.hidden)

    @property
    def iterations(self) -> int:
        return self.total_env_steps // (self.n_lanes * self.rollout_steps)


@dataclass
class PpoBatch:
    obs: np.ndarray          # (T, N, obs_dim)
    actions_raw: np.ndarray  # (T, N, act_dim) pre-clip Gaussian samples
    logp: np.ndarray         # (T, N)
    rewards: np.ndarray      # (T, N)
    dones: np.ndarray        # (T, N)
    next_obs: np.ndarray     # (T, N, obs_dim) pre-reset successor observation
    lane_resets: int = 0

    @property
    def size(self):
        return self.rewards.size


def collect(policy: PolicyNet, env, lanes: LaneSet, cfg: PpoConfig, rng) -> PpoBatch:
    """On-policy rollouts; simulator tapes are dropped as soon as a step returns."""
    T, n = cfg.rollout_steps, lanes.n
    H = env.params.horizon_H
    state = lanes.state
    obs = np.empty((T, n, env.obs_dim))
    next_obs = np.empty_like(obs)
    raw = np.empty((T, n, policy.act_dim))
    logp = np.empty((T, n))
    rewards = np.empty((T, n))
    dones = np.zeros((T, n), dtype=bool)
    resets = 0
    log_std = policy.log_std()
    for t in range(T):
        o = env.observe(state)
        mean = policy.mean(o)
        a_raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        nxt, r, _ = env.step_unchecked(state, np.clip(a_raw, -1.0, 1.0))
        bad = ~nxt.is_finite()
        if bad.any():
            resets += int(bad.sum())
            log.warning("non-finite state in lanes %s; resetting", np.flatnonzero(bad).tolist())
            nxt.q[bad], nxt.v[bad] = state.q[bad], state.v[bad]
        done = bad | (nxt.t >= H)
        obs[t], raw[t], rewards[t], dones[t] = o, a_raw, r, done
        logp[t] = nets.gaussian_log_prob(a_raw, mean, log_std)
        next_obs[t] = env.observe(nxt)
        if done.any():
            nxt = lanes.reset_lanes(np.flatnonzero(done), nxt)
        state = nxt
    lanes.state = state
    lanes.failures += resets
    return PpoBatch(obs, raw, logp, rewards, dones, next_obs, resets)


def gae_advantages(batch: PpoBatch, critic: CriticNet, cfg: PpoConfig, normalize: bool = True):
    """Generalised advantage estimates and value targets, each ``(T, N)``.

    Targets use the raw advantages; the returned advantages are standardised
    over the batch when ``normalize``.
    """
    T, n = batch.rewards.shape
    values = nets.critic_forward(critic, batch.obs.reshape(T * n, -1))[0].reshape(T, n)
    next_values = nets.critic_forward(critic, batch.next_obs.reshape(T * n, -1))[0].reshape(T, n)
    return _gae(batch.rewards, values, next_values, batch.dones, cfg.gamma, cfg.gae_lambda, normalize)


def _gae(rewards, values, next_values, dones, gamma, lam, normalize=True):
    cont = 1.0 - dones.astype(float)
    deltas = rewards + gamma * next_values * cont - values
    adv = np.empty_like(deltas)
    running = np.zeros(deltas.shape[1])
    for t in range(deltas.shape[0] - 1, -1, -1):
        running = deltas[t] + gamma * lam * cont[t] * running
        adv[t] = running
    targets = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, targets


def clipped_surrogate(logp_new, logp_old, adv, clip_ratio):
    """Loss ``-mean(min(r A, clip(r) A))`` and its derivative w.r.t. ``logp_new``.

    Returns ``(loss, d_loss_d_logp, clip_fraction, approx_kl)``.
    """
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    s1, s2 = ratio * adv, clipped * adv
    loss = -float(np.mean(np.minimum(s1, s2)))
    # the clipped branch is flat, so only the unclipped branch carries gradient
    g_ratio = np.where(s1 <= s2, adv, 0.0)
    d_logp = -g_ratio * ratio / ratio.size
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip_ratio))
    approx_kl = float(np.mean((ratio - 1.0) - (logp_new - logp_old)))
    return loss, d_logp, clip_frac, approx_kl


@dataclass
class PpoDiagnostics:
    policy_loss: float
    value_loss: float
    clip_fraction: float
    approx_kl: float
    updates: int
    clip_fractions: list = field(default_factory=list)


def ppo_update(policy: PolicyNet, critic: CriticNet, batch: PpoBatch, adv, targets, cfg: PpoConfig,
               actor_opt: AdamState, critic_opt: AdamState, rng) -> PpoDiagnostics:
    """``epochs x minibatch_count`` Adam steps on the actor and critic."""
    obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    acts = batch.actions_raw.reshape(-1, batch.actions_raw.shape[-1])
    logp_old = batch.logp.ravel()
    adv = np.asarray(adv).ravel()
    targets = np.asarray(targets).ravel()
    size = len(logp_old)
    p_losses, v_losses, fracs, kls = [], [], [], []
    updates = 0
    for _ in range(cfg.epochs):
        for idx in np.array_split(rng.permutation(size), cfg.minibatch_count):
            _, tape = nets.policy_forward(policy, obs[idx], np.zeros_like(acts[idx]))
            log_std = tape.log_std
            logp_new = nets.gaussian_log_prob(acts[idx], tape.mean, log_std)
            loss, d_logp, frac, kl = clipped_surrogate(logp_new, logp_old[idx], adv[idx], cfg.clip_ratio)
            entropy = nets.gaussian_entropy(log_std)
            var = np.exp(2.0 * log_std)
            diff = acts[idx] - tape.mean
            g_mean = d_logp[:, None] * diff / var
            g_log_std = (d_logp[:, None] * (diff * diff / var - 1.0)).sum(axis=0) - cfg.entropy_coef
            g, _ = nets.policy_backward_parts(policy, tape, g_mean, g_log_std)
            g, _ = clip_grad_norm(g, cfg.grad_clip)
            policy.params = adam_step(policy.params, g, actor_opt, cfg.actor_lr)

            values, ctape = nets.critic_forward(critic, obs[idx])
            resid = values - targets[idx]
            gc, _ = nets.critic_backward(critic, ctape, 2.0 * resid / len(idx))
            gc, _ = clip_grad_norm(gc, cfg.grad_clip)
            critic.params = adam_step(critic.params, gc, critic_opt, cfg.critic_lr)

            p_losses.append(loss - cfg.entropy_coef * entropy)
            v_losses.append(float(np.mean(resid * resid)))
            fracs.append(frac)
            kls.append(kl)
            updates += 1
    return PpoDiagnostics(float(np.mean(p_losses)), float(np.mean(v_losses)), float(np.mean(fracs)),
                          float(np.mean(kls)), updates, fracs)


@dataclass
class PpoResult:
    policy: PolicyNet
    critic: CriticNet
    records: list = field(default_factory=list)
    env_steps: int = 0
    grad_evals: int = 0


def train(env, cfg: PpoConfig, seed: int = 0, callback=None) -> PpoResult:
    """PPO with the same record schema as :func:`rl_lab.shac.train`.

    ``grad_evals`` counts surrogate updates per iteration.
    """
    seeds = np.random.SeedSequence(int(seed)).generate_state(4)
    policy = PolicyNet(env.obs_dim, env.act_dim, cfg.hidden, seed=int(seeds[0]))
    critic = CriticNet(env.obs_dim, cfg.hidden, seed=int(seeds[1]))
    rng = np.random.default_rng(int(seeds[2]))
    lanes = LaneSet(env, cfg.n_lanes, int(seeds[3]))
    actor_opt = AdamState.for_params(policy.params, lr=cfg.actor_lr)
    critic_opt = AdamState.for_params(critic.params, lr=cfg.critic_lr)
    result = PpoResult(policy, critic)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        batch = collect(policy, env, lanes, cfg, rng)
        adv, targets = gae_advantages(batch, critic, cfg)
        diag = ppo_update(policy, critic, batch, adv, targets, cfg, actor_opt, critic_opt, rng)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        result.env_steps += batch.size
        result.grad_evals += diag.updates
        row = {
            "episode": it + 1,
            "env_steps": result.env_steps,
            "eval_reward_mean": None,
            "eval_reward_std": None,
            "policy_loss": diag.policy_loss,
            "critic_loss": diag.value_loss,
            "grad_evals": diag.updates,
            "update_wall_ms": wall_ms,
        }
        if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations):
            rec = eval_policy(policy, env, None, NoiseSpec(0.0, int(seed)), cfg.eval_rollouts, int(seed))
            row["eval_reward_mean"], row["eval_reward_std"] = rec.mean_reward, rec.std_reward
        result.records.append(row)
        if callback is not None:
            callback(row)
    return result

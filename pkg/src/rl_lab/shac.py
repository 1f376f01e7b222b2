"""Short-horizon actor-critic with analytic policy gradients.

The actor loss over one window of ``h`` steps is back-propagated through the
recorded simulator tapes (BPTT); in ``asam`` mode the actor takes the
two-pass sharpness-aware step instead of a plain Adam step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .diffsim import LaneSet, StepTape, vjp
from .nets import CriticNet, ParamVector, PolicyNet
from .optim import AdamState, AsamConfig, adam_step, asam_perturb, asam_update, clip_grad_norm
from .robust import NoiseSpec, eval_policy

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Too many non-finite lane resets inside one training episode."""


@dataclass
class ShacConfig:
    n_lanes: int = 32
    horizon: int = 16
    gamma: float = 0.99
    td_lambda: float = 0.95
    target_alpha: float = 0.95
    actor_lr: float = 2e-3
    actor_lr_final: float = 1e-4
    critic_lr: float = 2e-3
    critic_epochs: int = 16
    mode: str = "plain"
    asam: AsamConfig | None = None
    episodes: int = 500
    grad_clip: float = 1.0
    hidden: tuple = (64, 64)
    eval_every: int = 10
    eval_rollouts: int = 16
    max_lane_resets: int = 10

    def __post_init__(self):
        if self.n_lanes < 1:
            raise ValueError("n_lanes must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.td_lambda <= 1.0:
            raise ValueError("td_lambda must lie in [0, 1]")
        if not 0.0 <= self.target_alpha <= 1.0:
            raise ValueError("target_alpha must lie in [0, 1]")
        if self.mode not in ("plain", "asam"):
            raise ValueError(f"mode must be 'plain' or 'asam', got {self.mode!r}")
        if self.mode == "asam" and self.asam is None:
            raise ValueError("mode='asam' requires an AsamConfig")
        self.hidden = tuple(self.hidden)

    def lr_at(self, episode: int) -> float:
        """Actor learning rate, linearly decayed over the run."""
        frac = episode / max(self.episodes, 1)
        return self.actor_lr + (self.actor_lr_final - self.actor_lr) * frac


@dataclass
class HorizonBatch:
    """One window of ``h`` steps over ``N`` lanes; time is the leading axis."""

    obs: np.ndarray            # (h, N, obs_dim) observation of s_t
    noise: np.ndarray          # (h, N, act_dim)
    actions_raw: np.ndarray    # (h, N, act_dim) before clipping
    actions: np.ndarray        # (h, N, act_dim) clipped, what the simulator saw
    rewards: np.ndarray        # (h, N)
    dones: np.ndarray          # (h, N) episode ended after this step
    next_obs: np.ndarray       # (h, N, obs_dim) observation of s_{t+1} (pre-reset)
    bootstrap_obs: np.ndarray  # (N, obs_dim) state the next window starts from
    step_tapes: list
    policy_tapes: list
    params: ParamVector        # actor parameters used for the rollout
    lane_resets: int = 0

    @property
    def h(self):
        return self.rewards.shape[0]

    @property
    def n(self):
        return self.rewards.shape[1]


def _mask_tape(tape: StepTape, lanes):
    for name in tape.__dataclass_fields__:
        arr = getattr(tape, name)
        arr[lanes] = 0.0


def rollout(policy: PolicyNet, env, lanes: LaneSet, cfg: ShacConfig, rng=None, noise=None) -> HorizonBatch:
    """Simulate ``h`` steps on every lane, recording tapes for BPTT.

    Lanes continue from where the previous window stopped; a lane that
    finishes its episode (or goes non-finite) is reset in place and the
    transition is flagged ``done``.
    """
    h, n = cfg.horizon, lanes.n
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal((h, n, policy.act_dim))
    noise = np.asarray(noise, dtype=float).reshape(h, n, policy.act_dim)
    H = env.params.horizon_H
    state = lanes.state
    obs = np.empty((h, n, env.obs_dim))
    next_obs = np.empty_like(obs)
    raw = np.empty((h, n, policy.act_dim))
    acts = np.empty_like(raw)
    rewards = np.empty((h, n))
    dones = np.zeros((h, n), dtype=bool)
    step_tapes, policy_tapes = [], []
    resets = 0
    for t in range(h):
        o = env.observe(state)
        a_raw, ptape = nets.policy_forward(policy, o, noise[t])
        a = np.clip(a_raw, -1.0, 1.0)
        nxt, r, stape = env.step_unchecked(state, a)
        bad = ~nxt.is_finite()
        if bad.any():
            lanes_bad = np.flatnonzero(bad)
            resets += len(lanes_bad)
            log.warning("non-finite state in lanes %s; resetting", lanes_bad.tolist())
            _mask_tape(stape, lanes_bad)
            nxt.q[lanes_bad] = state.q[lanes_bad]
            nxt.v[lanes_bad] = state.v[lanes_bad]
        done = bad | (nxt.t >= H)
        obs[t], raw[t], acts[t], rewards[t], dones[t] = o, a_raw, a, r, done
        next_obs[t] = env.observe(nxt)
        step_tapes.append(stape)
        policy_tapes.append(ptape)
        if done.any():
            nxt = lanes.reset_lanes(np.flatnonzero(done), nxt)
        state = nxt
    lanes.state = state
    lanes.failures += resets
    return HorizonBatch(obs, noise, raw, acts, rewards, dones, next_obs, env.observe(state),
                        step_tapes, policy_tapes, policy.params, resets)


def _discount_exponents(dones):
    """Steps since the current segment started, for every t in the window and the end."""
    h, n = dones.shape
    exps = np.zeros((h + 1, n), dtype=np.int64)
    for t in range(h):
        exps[t + 1] = np.where(dones[t], 0, exps[t] + 1)
    return exps


def policy_loss(batch: HorizonBatch, critic_target: CriticNet, cfg: ShacConfig, policy: PolicyNet, env):
    """Windowed actor loss and a closure computing its parameter gradient.

    ``L = -1/(N h) * sum_i [ sum_t gamma^e r_t + gamma^e_h V(s_h) ]`` where the
    exponent ``e`` counts steps since the lane's segment began; a segment that
    ends with ``done`` contributes no bootstrap value.

    ``grad(params=None)`` differentiates at ``params`` (default: the rollout
    parameters) while holding the recorded states, actions and noise fixed.
    It increments ``grad.evaluations`` on every call.
    """
    h, n = batch.h, batch.n
    gamma = cfg.gamma
    exps = _discount_exponents(batch.dones)
    disc = gamma ** exps.astype(float)
    scale = 1.0 / (n * h)
    has_boot = ~batch.dones[h - 1]
    v_boot, vtape = nets.critic_forward(critic_target, batch.bootstrap_obs)
    total = (disc[:h] * batch.rewards).sum() + np.where(has_boot, disc[h] * v_boot, 0.0).sum()
    loss = -scale * float(total)

    # cotangent of the bootstrap term w.r.t. the final state is parameter-free
    _, g_obs_boot = nets.critic_backward(critic_target, vtape, np.where(has_boot, -scale * disc[h], 0.0))
    g_q_end, g_v_end = env.observe_vjp(g_obs_boot)
    w_r = -scale * disc[:h]
    clip_mask = (np.abs(batch.actions_raw) <= 1.0).astype(float)

    def grad(params: ParamVector | None = None) -> ParamVector:
        grad.evaluations += 1
        if params is None or params is batch.params:
            ptapes = batch.policy_tapes
        else:
            ptapes = [nets.policy_forward(policy, batch.obs[t], batch.noise[t], params=params)[1] for t in range(h)]
        total_grad = ptapes[0].mlp.params.zeros_like()
        g_q, g_v = g_q_end, g_v_end
        for t in range(h - 1, -1, -1):
            keep = ~batch.dones[t][:, None]
            (g_q, g_v), g_a = vjp(batch.step_tapes[t], (g_q * keep, g_v * keep), w_r[t])
            g_param, g_obs = nets.policy_backward(policy, ptapes[t], g_a * clip_mask[t])
            total_grad.values += g_param.values
            dq, dv = env.observe_vjp(g_obs)
            g_q, g_v = g_q + dq, g_v + dv
        return total_grad

    grad.evaluations = 0
    return loss, grad


def td_lambda_targets(batch: HorizonBatch, critic_target: CriticNet, cfg: ShacConfig):
    """TD(lambda) value targets for every state in the window, shape ``(h, N)``.

    Uses the recursion ``G_t = r_t + gamma (1 - d_t) [(1 - lam) V(s_{t+1}) + lam G_{t+1}]``
    with ``G_h = V(s_h)``; a done transition bootstraps with zero.
    """
    h, n = batch.h, batch.n
    gamma, lam = cfg.gamma, cfg.td_lambda
    next_vals, _ = nets.critic_forward(critic_target, batch.next_obs.reshape(h * n, -1))
    next_vals = next_vals.reshape(h, n)
    boot, _ = nets.critic_forward(critic_target, batch.bootstrap_obs)
    targets = np.empty((h, n))
    # G_{t+1} for the last step is V(s_h); next_vals[h-1] equals it unless done
    ret = boot
    for t in range(h - 1, -1, -1):
        cont = (~batch.dones[t]).astype(float)
        ret = batch.rewards[t] + gamma * cont * ((1.0 - lam) * next_vals[t] + lam * ret)
        targets[t] = ret
    return targets


def critic_loss(critic: CriticNet, obs, targets, params: ParamVector | None = None):
    values, tape = nets.critic_forward(critic, obs, params)
    resid = values - targets
    return float(np.mean(resid * resid)), resid, tape


def critic_update(critic: CriticNet, obs, targets, cfg: ShacConfig, state: AdamState | None = None):
    """Full-batch Adam on the mean squared error for ``cfg.critic_epochs`` steps.

    Mutates ``critic.params`` and returns the per-epoch losses (each measured
    before that epoch's step).
    """
    obs = np.asarray(obs, dtype=float).reshape(-1, critic.obs_dim)
    targets = np.asarray(targets, dtype=float).ravel()
    if state is None:
        state = AdamState.for_params(critic.params, lr=cfg.critic_lr)
    losses = []
    for _ in range(cfg.critic_epochs):
        loss, resid, tape = critic_loss(critic, obs, targets)
        g, _ = nets.critic_backward(critic, tape, 2.0 * resid / len(targets))
        g, _ = clip_grad_norm(g, cfg.grad_clip)
        critic.params = adam_step(critic.params, g, state, cfg.critic_lr)
        losses.append(loss)
    return losses


def target_mix(target: ParamVector, critic: ParamVector, alpha: float) -> ParamVector:
    """Polyak blend ``alpha * target + (1 - alpha) * critic``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return target.with_values(alpha * target.values + (1.0 - alpha) * critic.values)


@dataclass
class TrainResult:
    policy: PolicyNet
    critic: CriticNet
    target_critic: CriticNet
    records: list = field(default_factory=list)
    env_steps: int = 0
    grad_evals: int = 0
    param_history: list = field(default_factory=list)


def _actor_step(policy, batch, critic_target, cfg, env, adam, lr):
    """One actor update; returns ``(loss, gradient_evaluations)``."""
    loss, grad_fn = policy_loss(batch, critic_target, cfg, policy, env)
    theta = policy.params
    g, _ = clip_grad_norm(grad_fn(), cfg.grad_clip)
    if cfg.mode == "plain":
        policy.params = adam_step(theta, g, adam, lr)
    else:
        eps = asam_perturb(theta, g, cfg.asam)
        g_pert, _ = clip_grad_norm(grad_fn(theta + eps), cfg.grad_clip)
        policy.params = asam_update(theta, g_pert, adam, cfg.asam, lr)
    return loss, grad_fn.evaluations


def train(env, cfg: ShacConfig, seed: int = 0, keep_params: bool = False, callback=None) -> TrainResult:
    """Run ``cfg.episodes`` SHAC (or SHAC-ASAM) episodes and return the learned nets.

    Each record holds: episode, env_steps, eval_reward_mean, eval_reward_std
    (``None`` between evaluations), policy_loss, critic_loss, grad_evals and
    update_wall_ms (rollout through actor step).
    """
    seeds = np.random.SeedSequence(int(seed)).generate_state(4)
    policy = PolicyNet(env.obs_dim, env.act_dim, cfg.hidden, seed=int(seeds[0]))
    critic = CriticNet(env.obs_dim, cfg.hidden, seed=int(seeds[1]))
    target = critic.copy()
    noise_rng = np.random.default_rng(int(seeds[2]))
    lanes = LaneSet(env, cfg.n_lanes, int(seeds[3]))
    actor_opt = AdamState.for_params(policy.params, lr=cfg.actor_lr)
    critic_opt = AdamState.for_params(critic.params, lr=cfg.critic_lr)
    result = TrainResult(policy, critic, target)

    for episode in range(cfg.episodes):
        t0 = time.perf_counter()
        batch = rollout(policy, env, lanes, cfg, noise_rng)
        if batch.lane_resets > cfg.max_lane_resets:
            raise TrainingAborted(f"{batch.lane_resets} non-finite lane resets in episode {episode}")
        loss, evals = _actor_step(policy, batch, target, cfg, env, actor_opt, cfg.lr_at(episode))
        wall_ms = (time.perf_counter() - t0) * 1000.0
        if not np.all(np.isfinite(policy.params.values)):
            raise TrainingAborted(f"non-finite actor parameters after episode {episode}")

        targets = td_lambda_targets(batch, target, cfg)
        c_losses = critic_update(critic, batch.obs.reshape(-1, env.obs_dim), targets, cfg, critic_opt)
        target.params = target_mix(target.params, critic.params, cfg.target_alpha)

        result.env_steps += batch.h * batch.n
        result.grad_evals += evals
        row = {
            "episode": episode + 1,
            "env_steps": result.env_steps,
            "eval_reward_mean": None,
            "eval_reward_std": None,
            "policy_loss": loss,
            "critic_loss": float(np.mean(c_losses)) if c_losses else 0.0,
            "grad_evals": evals,
            "update_wall_ms": wall_ms,
        }
        if cfg.eval_every and ((episode + 1) % cfg.eval_every == 0 or episode + 1 == cfg.episodes):
            rec = eval_policy(policy, env, None, NoiseSpec(0.0, int(seed)), cfg.eval_rollouts, int(seed))
            row["eval_reward_mean"], row["eval_reward_std"] = rec.mean_reward, rec.std_reward
        result.records.append(row)
        if keep_params:
            result.param_history.append(policy.params.values.copy())
        if callback is not None:
            callback(row)
    return result

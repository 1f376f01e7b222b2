"""scikit-learn style front ends: ``fit(env)``, ``predict(obs)``, ``score(env)``.

``X`` for ``fit``/``score`` is an environment: a name (``"bouncer1d"``), an
environment instance, or ``None`` for the estimator's ``env`` parameter.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import ppo as _ppo
from . import shac as _shac
from .diffsim import EnvParams, make_env
from .optim import AsamConfig
from .robust import NoiseSpec, eval_policy


def _resolve_env(X, default_name, env_params):
    if X is None:
        X = default_name
    if isinstance(X, str):
        params = EnvParams(**env_params) if env_params else None
        return make_env(X, params)
    if hasattr(X, "step") and hasattr(X, "observe"):
        return X
    raise TypeError(f"expected an environment or environment name, got {type(X).__name__}")


class _PolicyEstimator(BaseEstimator):
    def _check_obs(self, obs):
        check_is_fitted(self, "policy_")
        obs = check_array(obs, ensure_2d=False, dtype=np.float64)
        single = obs.ndim == 1
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.policy_.obs_dim:
            raise ValueError(f"expected {self.policy_.obs_dim} observation features, got {obs.shape[1]}")
        return obs, single

    def predict(self, obs):
        """Deterministic (mean) action, clipped to [-1, 1]."""
        obs, single = self._check_obs(obs)
        act = np.clip(self.policy_.mean(obs), -1.0, 1.0)
        return act[0] if single else act

    def score(self, X=None, y=None, rollouts=16, lambda_mix=0.0, seed=0):
        """Mean undiscounted episode reward of the deterministic policy."""
        check_is_fitted(self, "policy_")
        env = _resolve_env(X, self.env, self.env_params)
        rec = eval_policy(self.policy_, env, None, NoiseSpec(lambda_mix, seed), rollouts, seed)
        return rec.mean_reward


class SHAC(_PolicyEstimator):
    """Short-horizon actor-critic; ``rho`` switches on the sharpness-aware actor step.

    Parameters mirror :class:`rl_lab.shac.ShacConfig`.
    """

    def __init__(self, env="bouncer1d", env_params=None, n_lanes=32, horizon=16, gamma=0.99,
                 td_lambda=0.95, target_alpha=0.95, actor_lr=2e-3, actor_lr_final=1e-4, critic_lr=2e-3,
                 critic_epochs=16, episodes=500, grad_clip=1.0, hidden=(64, 64), eval_every=10,
                 eval_rollouts=16, rho=None, weight_decay=0.0, random_state=0):
        self.env = env
        self.env_params = env_params
        self.n_lanes = n_lanes
        self.horizon = horizon
        self.gamma = gamma
        self.td_lambda = td_lambda
        self.target_alpha = target_alpha
        self.actor_lr = actor_lr
        self.actor_lr_final = actor_lr_final
        self.critic_lr = critic_lr
        self.critic_epochs = critic_epochs
        self.episodes = episodes
        self.grad_clip = grad_clip
        self.hidden = hidden
        self.eval_every = eval_every
        self.eval_rollouts = eval_rollouts
        self.rho = rho
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _config(self):
        asam = None if self.rho is None else AsamConfig(rho=self.rho, weight_decay=self.weight_decay)
        return _shac.ShacConfig(
            n_lanes=self.n_lanes, horizon=self.horizon, gamma=self.gamma, td_lambda=self.td_lambda,
            target_alpha=self.target_alpha, actor_lr=self.actor_lr, actor_lr_final=self.actor_lr_final,
            critic_lr=self.critic_lr, critic_epochs=self.critic_epochs,
            mode="plain" if asam is None else "asam", asam=asam, episodes=self.episodes,
            grad_clip=self.grad_clip, hidden=self.hidden, eval_every=self.eval_every,
            eval_rollouts=self.eval_rollouts)

    def fit(self, X=None, y=None):
        env = _resolve_env(X, self.env, self.env_params)
        result = _shac.train(env, self._config(), self.random_state)
        self.env_ = env
        self.policy_ = result.policy
        self.critic_ = result.critic
        self.target_critic_ = result.target_critic
        self.history_ = result.records
        self.n_env_steps_ = result.env_steps
        self.n_grad_evals_ = result.grad_evals
        return self


class SHACASAM(SHAC):
    """SHAC with the adaptive sharpness-aware actor update (default ``rho=0.75``)."""

    def __init__(self, env="bouncer1d", env_params=None, n_lanes=32, horizon=16, gamma=0.99,
                 td_lambda=0.95, target_alpha=0.95, actor_lr=2e-3, actor_lr_final=1e-4, critic_lr=2e-3,
                 critic_epochs=16, episodes=500, grad_clip=1.0, hidden=(64, 64), eval_every=10,
                 eval_rollouts=16, rho=0.75, weight_decay=0.0, random_state=0):
        super().__init__(env, env_params, n_lanes, horizon, gamma, td_lambda, target_alpha, actor_lr,
                         actor_lr_final, critic_lr, critic_epochs, episodes, grad_clip, hidden, eval_every,
                         eval_rollouts, rho, weight_decay, random_state)

    def fit(self, X=None, y=None):
        if self.rho is None or not self.rho > 0:
            raise ValueError("SHACASAM requires rho > 0")
        return super().fit(X, y)


class PPO(_PolicyEstimator):
    """Clipped-surrogate PPO; parameters mirror :class:`rl_lab.ppo.PpoConfig`."""

    def __init__(self, env="bouncer1d", env_params=None, rollout_steps=64, n_lanes=32, gamma=0.99,
                 gae_lambda=0.95, clip_ratio=0.2, epochs=4, minibatch_count=4, actor_lr=3e-4,
                 critic_lr=1e-3, entropy_coef=1e-3, total_env_steps=256_000, grad_clip=1.0,
                 hidden=(64, 64), eval_every=2, eval_rollouts=16, random_state=0):
        self.env = env
        self.env_params = env_params
        self.rollout_steps = rollout_steps
        self.n_lanes = n_lanes
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_ratio = clip_ratio
        self.epochs = epochs
        self.minibatch_count = minibatch_count
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.entropy_coef = entropy_coef
        self.total_env_steps = total_env_steps
        self.grad_clip = grad_clip
        self.hidden = hidden
        self.eval_every = eval_every
        self.eval_rollouts = eval_rollouts
        self.random_state = random_state

    def _config(self):
        params = self.get_params()
        for key in ("env", "env_params", "random_state"):
            params.pop(key)
        return _ppo.PpoConfig(**params)

    def fit(self, X=None, y=None):
        env = _resolve_env(X, self.env, self.env_params)
        result = _ppo.train(env, self._config(), self.random_state)
        self.env_ = env
        self.policy_ = result.policy
        self.critic_ = result.critic
        self.history_ = result.records
        self.n_env_steps_ = result.env_steps
        self.n_grad_evals_ = result.grad_evals
        return self

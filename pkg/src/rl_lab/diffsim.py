"""Desk-scale differentiable contact environments.

Both environments are vectorised over a leading lane axis: positions and
velocities have shape ``(n, 1)`` and actions ``(n, act_dim)``.  ``step``
records a :class:`StepTape` holding the local partial derivatives so that
:func:`vjp` can pull cotangents back through the step analytically.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

GRAVITY = 9.81


class NonFiniteState(FloatingPointError):
    """Integration produced NaN/Inf in one or more lanes."""

    def __init__(self, lanes):
        self.lanes = np.asarray(lanes, dtype=int)
        super().__init__(f"non-finite state in lanes {self.lanes.tolist()}")


@dataclass(frozen=True)
class EnvParams:
    k_e: float = 400.0
    k_d: float = 10.0
    mu: float = 0.5
    dt: float = 0.01
    horizon_H: int = 240

    def __post_init__(self):
        if not self.k_e > 0:
            raise ValueError(f"k_e must be > 0, got {self.k_e}")
        if not self.k_d >= 0:
            raise ValueError(f"k_d must be >= 0, got {self.k_d}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if int(self.horizon_H) != self.horizon_H or self.horizon_H < 1:
            raise ValueError(f"horizon_H must be a positive integer, got {self.horizon_H}")

    def override(self, **kwargs) -> "EnvParams":
        return replace(self, **kwargs)


@dataclass
class EnvState:
    q: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def copy(self) -> "EnvState":
        return EnvState(self.q.copy(), self.v.copy(), self.t.copy())

    def take(self, idx) -> "EnvState":
        return EnvState(self.q[idx].copy(), self.v[idx].copy(), self.t[idx].copy())

    def is_finite(self) -> np.ndarray:
        return np.isfinite(self.q).all(axis=1) & np.isfinite(self.v).all(axis=1)


@dataclass
class StepTape:
    """Local Jacobian entries of one vectorised step.

    For the 1-D environments every block is a per-lane scalar, stored as an
    ``(n, 1)`` array (``dr_da`` has shape ``(n, act_dim)``).
    """

    dqn_dq: np.ndarray
    dqn_dv: np.ndarray
    dqn_da: np.ndarray
    dvn_dq: np.ndarray
    dvn_dv: np.ndarray
    dvn_da: np.ndarray
    dr_dq: np.ndarray
    dr_dv: np.ndarray
    dr_da: np.ndarray


def vjp(tape: StepTape, w_state, w_reward):
    """Pull ``(w_q, w_v)`` on the next state and ``w_reward`` back to the inputs.

    Returns ``((g_q, g_v), g_action)``.
    """
    w_q, w_v = w_state
    w_r = np.asarray(w_reward, dtype=float).reshape(-1, 1)
    g_q = w_q * tape.dqn_dq + w_v * tape.dvn_dq + w_r * tape.dr_dq
    g_v = w_q * tape.dqn_dv + w_v * tape.dvn_dv + w_r * tape.dr_dv
    g_a = w_q * tape.dqn_da + w_v * tape.dvn_da + w_r * tape.dr_da
    return (g_q, g_v), g_a


def _as_lanes(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim < 2 else x


class _Env1D:
    name = ""
    obs_dim = 2
    act_dim = 1
    mass = 1.0

    def __init__(self, params: EnvParams | None = None):
        self.params = params if params is not None else EnvParams()

    def __repr__(self):
        return f"{type(self).__name__}({self.params!r})"

    def make_state(self, q, v, t=0) -> EnvState:
        q = _as_lanes(q)
        v = _as_lanes(v)
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (q.shape[0],)).copy()
        return EnvState(q, v, t)

    def reset(self, seed, params: EnvParams | None = None) -> EnvState:
        """Initial state(s); ``seed`` may be an int or a sequence of ints (one lane each)."""
        seeds = np.atleast_1d(np.asarray(seed, dtype=np.int64))
        q = np.empty((len(seeds), 1))
        v = np.empty((len(seeds), 1))
        for i, s in enumerate(seeds):
            q[i, 0], v[i, 0] = self._sample_initial(np.random.default_rng(int(s)))
        return self.make_state(q, v, 0)

    def _check_action(self, state, action):
        action = np.asarray(action, dtype=float).reshape(state.n, self.act_dim)
        assert np.all(np.abs(action) <= 1.0), "actions must be clipped to [-1, 1] before step"
        return action

    def step(self, state: EnvState, action, params: EnvParams | None = None):
        """Advance every lane one step; returns ``(next_state, reward, tape)``."""
        p = self.params if params is None else params
        a = self._check_action(state, action)
        nxt, reward, tape = self._step(state, a, p)
        ok = nxt.is_finite()
        if not ok.all():
            raise NonFiniteState(np.flatnonzero(~ok))
        return nxt, reward, tape

    def step_unchecked(self, state, action, params=None):
        """Like :meth:`step` but leaves non-finite lanes in place for the caller."""
        p = self.params if params is None else params
        return self._step(state, self._check_action(state, action), p)

    def observe_vjp(self, g_obs):
        raise NotImplementedError


class Bouncer1D(_Env1D):
    """Thrust-controlled point mass above a spring-damper ground.

    Exercises contact stiffness ``k_e`` and damping ``k_d``.
    """

    name = "bouncer1d"
    u_max = 15.0

    def __init__(self, params: EnvParams | None = None, u_max: float | None = None):
        # u_max below the 9.81 N weight makes hovering impossible, so any height
        # has to come from the ground spring; the default thrust can simply fly.
        super().__init__(params)
        if u_max is not None:
            if not u_max > 0:
                raise ValueError(f"u_max must be > 0, got {u_max}")
            self.u_max = float(u_max)

    def _sample_initial(self, rng):
        return rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1)

    def _step(self, state, a, p):
        m, dt = self.mass, p.dt
        y, v = state.q, state.v
        u = a * self.u_max
        depth = np.maximum(0.0, -y)
        in_contact = (depth > 0.0).astype(float)
        z = p.k_e * depth - p.k_d * v * in_contact
        active = (z > 0.0).astype(float)
        f_n = active * z

        v_next = v + dt * (u - m * GRAVITY + f_n) / m
        y_next = y + dt * v_next
        reward = (y - 0.1 * np.sum(a * a, axis=1, keepdims=True))[:, 0]

        # max(0, .) has subgradient 0 at the kink
        dfn_dy = -active * in_contact * p.k_e
        dfn_dv = -active * in_contact * p.k_d
        dvn_dq = dt * dfn_dy / m
        dvn_dv = 1.0 + dt * dfn_dv / m
        dvn_da = np.full_like(a, dt * self.u_max / m)
        tape = StepTape(
            dqn_dq=1.0 + dt * dvn_dq,
            dqn_dv=dt * dvn_dv,
            dqn_da=dt * dvn_da,
            dvn_dq=dvn_dq,
            dvn_dv=dvn_dv,
            dvn_da=dvn_da,
            dr_dq=np.ones_like(y),
            dr_dv=np.zeros_like(v),
            dr_da=-0.2 * a,
        )
        return EnvState(y_next, v_next, state.t + 1), reward, tape

    def normal_force(self, state: EnvState, params: EnvParams | None = None):
        p = self.params if params is None else params
        depth = np.maximum(0.0, -state.q)
        return np.maximum(0.0, p.k_e * depth - p.k_d * state.v * (depth > 0))

    def observe(self, state: EnvState) -> np.ndarray:
        return np.concatenate([state.q, state.v], axis=1)

    def observe_vjp(self, g_obs):
        return g_obs[:, 0:1], g_obs[:, 1:2]


class Slider1D(_Env1D):
    """Force-driven block on a floor with smooth Coulomb friction.

    Exercises the friction coefficient ``mu``; the task is to track a target
    speed.
    """

    name = "slider1d"
    u_max = 10.0
    v_slip = 0.1
    v_target = 1.5

    def _sample_initial(self, rng):
        return 0.0, 0.0

    def _step(self, state, a, p):
        m, dt = self.mass, p.dt
        x, v = state.q, state.v
        u = a * self.u_max
        th = np.tanh(v / self.v_slip)
        f_t = -p.mu * m * GRAVITY * th

        v_next = v + dt * (u + f_t) / m
        x_next = x + dt * v_next
        err = v - self.v_target
        reward = (-(err * err) - 0.01 * np.sum(a * a, axis=1, keepdims=True))[:, 0]

        dft_dv = -p.mu * m * GRAVITY * (1.0 - th * th) / self.v_slip
        dvn_dv = 1.0 + dt * dft_dv / m
        dvn_da = np.full_like(a, dt * self.u_max / m)
        tape = StepTape(
            dqn_dq=np.ones_like(x),
            dqn_dv=dt * dvn_dv,
            dqn_da=dt * dvn_da,
            dvn_dq=np.zeros_like(x),
            dvn_dv=dvn_dv,
            dvn_da=dvn_da,
            dr_dq=np.zeros_like(x),
            dr_dv=-2.0 * err,
            dr_da=-0.02 * a,
        )
        return EnvState(x_next, v_next, state.t + 1), reward, tape

    def observe(self, state: EnvState) -> np.ndarray:
        return np.concatenate([state.v, self.v_target - state.v], axis=1)

    def observe_vjp(self, g_obs):
        return np.zeros_like(g_obs[:, 0:1]), g_obs[:, 0:1] - g_obs[:, 1:2]


def lane_seed(seed: int, lane: int, count: int) -> int:
    """Reset seed for the ``count``-th episode of ``lane`` in a run seeded by ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(lane), int(count)]).generate_state(1, np.uint32)[0])


class LaneSet:
    """Persistent parallel environment lanes with per-lane episode counters."""

    def __init__(self, env, n_lanes: int, seed: int):
        self.env = env
        self.seed = int(seed)
        self.episodes = np.zeros(n_lanes, dtype=np.int64)
        self.state = env.reset([lane_seed(seed, i, 0) for i in range(n_lanes)])
        self.failures = 0

    @property
    def n(self):
        return self.state.n

    def reset_lanes(self, lanes, state: EnvState | None = None) -> EnvState:
        """Reset ``lanes`` of ``state`` (default: current state) in place and return it."""
        state = self.state if state is None else state
        for i in np.atleast_1d(lanes):
            self.episodes[i] += 1
            fresh = self.env.reset(lane_seed(self.seed, i, self.episodes[i]))
            state.q[i], state.v[i], state.t[i] = fresh.q[0], fresh.v[0], 0
        return state


ENVIRONMENTS = {cls.name: cls for cls in (Bouncer1D, Slider1D)}

# axes each environment responds to
SWEEP_AXES = {"bouncer1d": ("k_e", "k_d"), "slider1d": ("mu",)}


def make_env(name: str, params: EnvParams | None = None):
    try:
        cls = ENVIRONMENTS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(params)


def step(env, state, action, params=None):
    return env.step(state, action, params)


def observe(env, state):
    return env.observe(state)


def reset(env, seed, params=None):
    return env.reset(seed, params)

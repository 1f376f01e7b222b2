"""Robustness evaluation: action-noise injection and physical-parameter sweeps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffsim import SWEEP_AXES, EnvParams, lane_seed

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(round(0.05 * i, 2) for i in range(11))
DEFAULT_GRIDS = {
    "bouncer1d": {"k_e": [100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0], "k_d": [1.0, 3.0, 10.0, 30.0, 100.0]},
    "slider1d": {"mu": [round(0.1 * i, 1) for i in range(1, 11)]},
}
REFERENCE_TIME_RATIOS = {"Ant": 2460 / 1436, "Humanoid": 8373 / 4400}


@dataclass(frozen=True)
class NoiseSpec:
    lambda_mix: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError(f"lambda_mix must lie in [0, 1], got {self.lambda_mix}")


@dataclass
class SweepGrid:
    axes: dict
    rollouts_per_cell: int = 100
    policies_per_algorithm: int = 3

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in ("k_e", "k_d", "mu"):
                raise ValueError(f"unknown sweep axis {name!r}")
            values = list(values)
            if not values:
                raise ValueError(f"axis {name!r} has no values")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"axis {name!r} values must be strictly increasing")

    @property
    def names(self):
        return list(self.axes)

    @property
    def shape(self):
        return tuple(len(v) for v in self.axes.values())

    def cells(self):
        """Yield ``(index_tuple, overrides)`` in row-major order."""
        for idx in np.ndindex(*self.shape):
            yield idx, {n: float(self.axes[n][i]) for n, i in zip(self.names, idx)}


@dataclass
class EvalRecord:
    algo: str
    policy_seed: int
    setting: dict
    mean_reward: float
    std_reward: float
    rollouts: int
    failures: int = 0
    rewards: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.rollouts <= 0:
            raise ValueError("rollout count must be positive")


def inject_noise(a, lambda_mix, draw):
    """Clip to [-1, 1] then mix with a uniform draw: ``(1 - lam) a + lam n``.

    ``lambda_mix`` may be a scalar or an array broadcast against ``a``.
    """
    a_c = np.clip(a, -1.0, 1.0)
    draw = np.asarray(draw, dtype=float)
    if np.ndim(lambda_mix) == 0:
        if lambda_mix == 0.0:
            return a_c
        if lambda_mix == 1.0:
            return np.array(draw, dtype=float, copy=True)
        mixed = (1.0 - lambda_mix) * a_c + lambda_mix * draw
        # rounding guard only; the convex combination already lies in [-1, 1]
        return np.clip(mixed, -1.0, 1.0)
    lam = np.asarray(lambda_mix, dtype=float)
    mixed = np.clip((1.0 - lam) * a_c + lam * draw, -1.0, 1.0)
    # the endpoints are returned exactly, not through the arithmetic above
    return np.where(lam == 0.0, a_c, np.where(lam == 1.0, draw, mixed))


def noise_draws(rng_seed: int, policy_index: int, rollouts: int, horizon: int, act_dim: int):
    """Uniform(-1, 1) draws of shape ``(horizon, rollouts, act_dim)``.

    One counter-keyed stream per (seed, policy slot, rollout) so that every
    algorithm sees the same realisations.
    """
    out = np.empty((horizon, rollouts, act_dim))
    for r in range(rollouts):
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), int(policy_index), r, 0x9E37]))
        out[:, r, :] = rng.uniform(-1.0, 1.0, size=(horizon, act_dim))
    return out


def rollout_seeds(seed: int, rollouts: int):
    return [lane_seed(seed, r, 0x5EED) for r in range(rollouts)]


def episode_rewards(policy, env, params: EnvParams, lambda_mix: float, draws, start_seeds):
    """Undiscounted full-horizon rewards of the deterministic policy, one per rollout.

    Returns ``(rewards, failed)``; a rollout whose state goes non-finite keeps
    its partial sum and stops accumulating.
    """
    state = env.reset(start_seeds)
    n = state.n
    total = np.zeros(n)
    failed = np.zeros(n, dtype=bool)
    for t in range(params.horizon_H):
        a = policy.mean(env.observe(state))
        a = inject_noise(a, lambda_mix, draws[t])
        nxt, r, _ = env.step_unchecked(state, a, params)
        total += np.where(failed, 0.0, r)
        bad = ~nxt.is_finite() & ~failed
        if bad.any():
            failed |= bad
            log.info("rollouts %s went non-finite at step %d", np.flatnonzero(bad).tolist(), t)
        # frozen lanes keep their last finite state
        keep = failed[:, None]
        state = type(state)(np.where(keep, state.q, nxt.q), np.where(keep, state.v, nxt.v), nxt.t)
    return total, failed


def eval_policy(policy, env, params_override: EnvParams | None = None, noise: NoiseSpec | None = None,
                rollouts: int = 100, seed: int = 0, algo: str = "", policy_seed: int = 0, policy_index: int = 0):
    """Mean and population std of episode reward over ``rollouts`` episodes."""
    params = env.params if params_override is None else params_override
    noise = NoiseSpec(0.0, seed) if noise is None else noise
    draws = noise_draws(noise.rng_seed, policy_index, rollouts, params.horizon_H, env.act_dim)
    rewards, failed = episode_rewards(policy, env, params, noise.lambda_mix, draws, rollout_seeds(seed, rollouts))
    setting = {"lambda_mix": noise.lambda_mix, "k_e": params.k_e, "k_d": params.k_d, "mu": params.mu}
    return EvalRecord(algo, policy_seed, setting, float(rewards.mean()), float(rewards.std()),
                      rollouts, int(failed.sum()), rewards)


def _iter_policies(policies):
    """``policies`` maps algorithm -> list of ``(policy_seed, PolicyNet)``."""
    for algo, entries in policies.items():
        for index, (pseed, net) in enumerate(entries):
            yield algo, index, pseed, net


def noise_sweep(policies, env, lambdas=DEFAULT_LAMBDAS, rollouts: int = 100, seed: int = 0):
    lambdas = [float(x) for x in lambdas]
    if any(not 0.0 <= x <= 1.0 for x in lambdas):
        raise ValueError("noise strengths must lie in [0, 1]")
    table = []
    for algo, index, pseed, net in _iter_policies(policies):
        for lam in lambdas:
            table.append(eval_policy(net, env, None, NoiseSpec(lam, seed), rollouts, seed, algo, pseed, index))
    return table


def param_sweep(policies, env, grid: SweepGrid, rollouts: int | None = None, seed: int = 0):
    """Evaluate every grid cell without action noise.

    Returns ``(table, matrices)`` where ``matrices[algo]`` holds the per-cell
    mean over that algorithm's policies with the grid's shape.
    """
    allowed = SWEEP_AXES.get(env.name, ())
    bad = [a for a in grid.names if a not in allowed]
    if bad:
        raise ValueError(f"axes {bad} have no effect on {env.name}; use {list(allowed)}")
    rollouts = grid.rollouts_per_cell if rollouts is None else rollouts
    table, sums, counts = [], {}, {}
    for algo, index, pseed, net in _iter_policies(policies):
        acc = sums.setdefault(algo, np.zeros(grid.shape))
        counts[algo] = counts.get(algo, 0) + 1
        for idx, overrides in grid.cells():
            params = env.params.override(**overrides)
            rec = eval_policy(net, env, params, NoiseSpec(0.0, seed), rollouts, seed, algo, pseed, index)
            table.append(rec)
            acc[idx] += rec.mean_reward
    matrices = {algo: sums[algo] / counts[algo] for algo in sums}
    return table, matrices


def rho_study(env, rhos, cfg, seeds, lambdas=DEFAULT_LAMBDAS, rollouts: int = 100, eval_seed: int = 0):
    """Train SHAC-ASAM once per (rho, seed) with a shared budget, then noise-sweep each rho.

    Returns a dict ``rho -> {"runs": [TrainResult], "table": [EvalRecord], "env_steps": int}``.
    """
    from dataclasses import replace

    from .optim import AsamConfig
    from .shac import train

    out = {}
    for rho in rhos:
        asam = AsamConfig(rho=float(rho), weight_decay=cfg.asam.weight_decay if cfg.asam else 0.0)
        run_cfg = replace(cfg, mode="asam", asam=asam)
        runs = [train(env, run_cfg, s) for s in seeds]
        budget = {r.env_steps for r in runs}
        assert len(budget) == 1, "runs under one rho must share the sample budget"
        policies = {f"shac-asam-rho{rho:g}": [(s, r.policy) for s, r in zip(seeds, runs)]}
        out[float(rho)] = {"runs": runs, "table": noise_sweep(policies, env, lambdas, rollouts, eval_seed),
                           "env_steps": budget.pop()}
    return out


def overhead_report(runs):
    """Aggregate per-algorithm timing from ``runs``: iterable of ``(algo, records)``.

    ``records`` are learning-curve rows with ``update_wall_ms`` and
    ``grad_evals``.  Ratios are taken against ``shac`` when present.
    """
    per_algo = {}
    for algo, records in runs:
        if not records:
            raise ValueError(f"empty run for {algo}")
        for col in ("update_wall_ms", "grad_evals"):
            if any(col not in r for r in records):
                raise KeyError(col)
        wall = np.array([float(r["update_wall_ms"]) for r in records])
        evals = np.array([float(r["grad_evals"]) for r in records])
        d = per_algo.setdefault(algo, {"total_s": [], "update_ms": [], "evals": []})
        d["total_s"].append(wall.sum() / 1000.0)
        d["update_ms"].append(wall.mean())
        d["evals"].append(evals.mean())
    base = per_algo.get("shac")
    rows = []
    for algo in sorted(per_algo):
        d = per_algo[algo]
        row = {
            "algo": algo,
            "runs": len(d["total_s"]),
            "train_s_mean": float(np.mean(d["total_s"])),
            "train_s_std": float(np.std(d["total_s"])),
            "update_ms_mean": float(np.mean(d["update_ms"])),
            "update_ms_std": float(np.std(d["update_ms"])),
            "grad_evals_per_update": float(np.mean(d["evals"])),
            "wall_ratio_vs_shac": float("nan"),
            "grad_eval_ratio_vs_shac": float("nan"),
        }
        if base is not None:
            row["wall_ratio_vs_shac"] = row["update_ms_mean"] / float(np.mean(base["update_ms"]))
            row["grad_eval_ratio_vs_shac"] = row["grad_evals_per_update"] / float(np.mean(base["evals"]))
        rows.append(row)
    return rows


def coefficient_of_variation(values):
    values = np.asarray(values, dtype=float)
    return float(values.std() / abs(values.mean()))


# -- heatmap ---------------------------------------------------------------

_LOW = np.array([68.0, 1.0, 84.0])
_HIGH = np.array([253.0, 231.0, 37.0])


def _color(frac):
    rgb = np.rint(_LOW + (_HIGH - _LOW) * frac).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def heatmap_svg(matrix, row_values, col_values, row_label, col_label, title="",
                vmin=None, vmax=None, digest=""):
    """Deterministic SVG heatmap; rows bottom-to-top, columns left-to-right."""
    matrix = np.asarray(matrix, dtype=float)
    vmin = float(matrix.min()) if vmin is None else float(vmin)
    vmax = float(matrix.max()) if vmax is None else float(vmax)
    span = vmax - vmin
    n_rows, n_cols = matrix.shape
    cell, left, top = 60, 90, 40
    width = left + n_cols * cell + 120
    height = top + n_rows * cell + 60
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
    ]
    if digest:
        parts.append(f"<metadata>config_digest={digest}</metadata>")
    parts.append(f'<text x="{left}" y="20" font-size="13">{title}</text>')
    for i in range(n_rows):
        y = top + (n_rows - 1 - i) * cell
        parts.append(f'<text x="{left - 6}" y="{y + cell // 2 + 4}" text-anchor="end">{row_values[i]:g}</text>')
        for j in range(n_cols):
            x = left + j * cell
            frac = 0.0 if span <= 0 else (matrix[i, j] - vmin) / span
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(frac)}"/>')
            parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle" '
                         f'fill="{"#000000" if frac > 0.5 else "#ffffff"}">{matrix[i, j]:.4g}</text>')
    bottom = top + n_rows * cell
    for j in range(n_cols):
        parts.append(f'<text x="{left + j * cell + cell // 2}" y="{bottom + 16}" '
                     f'text-anchor="middle">{col_values[j]:g}</text>')
    parts.append(f'<text x="{left + n_cols * cell // 2}" y="{bottom + 40}" text-anchor="middle">{col_label}</text>')
    parts.append(f'<text x="16" y="{top + n_rows * cell // 2}" '
                 f'transform="rotate(-90 16 {top + n_rows * cell // 2})" text-anchor="middle">{row_label}</text>')
    lx = left + n_cols * cell + 30
    for k, frac in enumerate(np.linspace(1.0, 0.0, 5)):
        y = top + k * 24
        parts.append(f'<rect x="{lx}" y="{y}" width="16" height="16" fill="{_color(frac)}"/>')
        parts.append(f'<text x="{lx + 22}" y="{y + 12}">{vmin + frac * span:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

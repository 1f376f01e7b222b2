"""Declarative run configuration: YAML in, validated dataclasses out.

The digest of a config is the SHA-256 of its canonical text: every field
resolved (defaults filled in), keys sorted, every number printed as its
shortest round-trip float.  ``output_dir`` and ``seeds`` are left out so the
same experiment gives the same digest wherever and for whichever seeds it runs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .diffsim import ENVIRONMENTS, SWEEP_AXES, EnvParams, make_env
from .optim import AsamConfig
from .ppo import PpoConfig
from .robust import DEFAULT_GRIDS, DEFAULT_LAMBDAS, SweepGrid
from .shac import ShacConfig

ALGORITHMS = ("shac", "shac-asam", "ppo")
ENV_EXTRAS = ("name", "u_max")


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass
class SweepSettings:
    lambdas: tuple = DEFAULT_LAMBDAS
    rollouts: int = 100
    seed: int = 0
    grid: dict = field(default_factory=dict)
    rhos: tuple = (0.05, 0.25, 0.75)


@dataclass
class RunConfig:
    env: str
    algorithm: str
    env_params: EnvParams
    shac: ShacConfig
    ppo: PpoConfig
    asam: AsamConfig | None
    sweep: SweepSettings
    seeds: tuple = (0,)
    output_dir: str = "runs"
    u_max: float | None = None

    def make_env(self):
        env = make_env(self.env, self.env_params)
        if self.u_max is not None:
            env = type(env)(self.env_params, u_max=self.u_max)
        return env

    def algo_config(self):
        if self.algorithm == "ppo":
            return self.ppo
        if self.algorithm == "shac-asam":
            return dataclasses.replace(self.shac, mode="asam", asam=self.asam)
        return dataclasses.replace(self.shac, mode="plain", asam=None)

    def sweep_grid(self) -> SweepGrid:
        axes = self.sweep.grid or DEFAULT_GRIDS[self.env]
        return SweepGrid(dict(axes), rollouts_per_cell=self.sweep.rollouts)

    def canonical(self) -> dict:
        shac = dataclasses.asdict(self.shac)
        for key in ("mode", "asam"):
            shac.pop(key)
        env = dataclasses.asdict(self.env_params)
        env["name"] = self.env
        if self.u_max is not None:
            env["u_max"] = self.u_max
        sweep = dataclasses.asdict(self.sweep)
        sweep["grid"] = {k: list(v) for k, v in self.sweep_grid().axes.items()}
        doc = {"algorithm": self.algorithm, "env": env, "shac": shac,
               "ppo": dataclasses.asdict(self.ppo), "sweep": sweep}
        if self.asam is not None:
            doc["asam"] = {"rho": self.asam.rho, "weight_decay": self.asam.weight_decay}
        return _normalise(doc)

    def canonical_text(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _normalise(obj):
    """Numbers become shortest-repr floats so ``400`` and ``400.0`` hash alike."""
    if isinstance(obj, dict):
        return {str(k): _normalise(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalise(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, float)):
        return repr(float(obj))
    raise TypeError(f"cannot canonicalise {type(obj).__name__}")


def _block(raw, name, cls, exclude=()):
    """Build ``cls`` from mapping ``raw[name]``; unknown or invalid keys raise ConfigError."""
    data = raw.get(name) or {}
    if not isinstance(data, dict):
        raise ConfigError(name, "expected a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", f"unknown field; expected one of {sorted(allowed)}")
    try:
        return cls(**data)
    except ValueError as err:
        culprit = next((k for k in data if k in str(err)), None)
        raise ConfigError(f"{name}.{culprit}" if culprit else name, str(err)) from None
    except TypeError as err:
        raise ConfigError(name, str(err)) from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    known = {"env", "algorithm", "shac", "ppo", "asam", "sweep", "seeds", "output_dir"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, f"unknown top-level field; expected one of {sorted(known)}")

    env_raw = raw.get("env")
    if not isinstance(env_raw, dict) or "name" not in env_raw:
        raise ConfigError("env.name", "environment name is required")
    env_name = str(env_raw["name"]).lower()
    if env_name not in ENVIRONMENTS:
        raise ConfigError("env.name", f"unknown environment {env_name!r}; choose from {sorted(ENVIRONMENTS)}")
    env_params = _block({"env": {k: v for k, v in env_raw.items() if k not in ENV_EXTRAS}}, "env", EnvParams)
    u_max = env_raw.get("u_max")
    if u_max is not None:
        if env_name != "bouncer1d":
            raise ConfigError("env.u_max", "only the bouncer1d thrust limit is configurable")
        if not isinstance(u_max, (int, float)) or not u_max > 0:
            raise ConfigError("env.u_max", f"must be a positive number, got {u_max!r}")
        u_max = float(u_max)

    algorithm = raw.get("algorithm")
    if algorithm not in ALGORITHMS:
        raise ConfigError("algorithm", f"expected one of {list(ALGORITHMS)}, got {algorithm!r}")

    has_asam = raw.get("asam") is not None
    if algorithm == "shac-asam" and not has_asam:
        raise ConfigError("asam", "block is required when algorithm is shac-asam")
    if algorithm != "shac-asam" and has_asam:
        raise ConfigError("asam", f"block is only valid for shac-asam, not {algorithm}")
    asam = _block(raw, "asam", AsamConfig, exclude=("denom_floor", "degenerate_events")) if has_asam else None

    shac = _block(raw, "shac", ShacConfig, exclude=("mode", "asam"))
    ppo = _block(raw, "ppo", PpoConfig)
    sweep = _block(raw, "sweep", SweepSettings)
    sweep.lambdas = tuple(float(x) for x in sweep.lambdas)
    sweep.rhos = tuple(float(x) for x in sweep.rhos)
    if any(not 0.0 <= x <= 1.0 for x in sweep.lambdas):
        raise ConfigError("sweep.lambdas", "noise strengths must lie in [0, 1]")
    if any(not x > 0 for x in sweep.rhos):
        raise ConfigError("sweep.rhos", "rho values must be > 0")
    if sweep.rollouts < 1:
        raise ConfigError("sweep.rollouts", "must be >= 1")
    try:
        grid = SweepGrid(dict(sweep.grid or DEFAULT_GRIDS[env_name]))
    except ValueError as err:
        raise ConfigError("sweep.grid", str(err)) from None
    bad = [a for a in grid.names if a not in SWEEP_AXES[env_name]]
    if bad:
        raise ConfigError("sweep.grid", f"axes {bad} do not affect {env_name}")

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of non-negative integers")
    return RunConfig(env_name, algorithm, env_params, shac, ppo, asam, sweep, tuple(seeds),
                     str(raw.get("output_dir", "runs")), u_max)


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError("<yaml>", str(err)) from None
    return from_dict(raw if raw is not None else {})


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())

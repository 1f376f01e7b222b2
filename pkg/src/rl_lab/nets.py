"""Tanh MLPs over a flat parameter vector with hand-written reverse mode."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = 0.0
LOG_STD_INIT = math.log(0.3)
CHECKPOINT_VERSION = 1


class ParamVector:
    """Flat float64 storage with named, shaped views.

    Arithmetic returns new vectors sharing the (immutable) layout.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        self.layout = tuple((str(n), int(o), tuple(int(s) for s in shp)) for n, o, shp in layout)
        values = np.array(values, dtype=np.float64).ravel()
        size = sum(int(np.prod(shp)) for _, _, shp in self.layout)
        if values.size != size:
            raise ValueError(f"expected {size} values for layout, got {values.size}")
        self.values = values

    @classmethod
    def zeros(cls, layout):
        size = sum(int(np.prod(shp)) for _, _, shp in layout)
        return cls(np.zeros(size), layout)

    def view(self, name):
        for n, off, shp in self.layout:
            if n == name:
                return self.values[off:off + int(np.prod(shp))].reshape(shp)
        raise KeyError(name)

    @property
    def names(self):
        return [n for n, _, _ in self.layout]

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(size={len(self)}, layers={self.names})"

    def _wrap(self, values):
        out = object.__new__(ParamVector)
        out.layout = self.layout
        out.values = values
        return out

    def _other(self, other):
        if isinstance(other, ParamVector):
            if other.layout != self.layout:
                raise ValueError("parameter layouts differ")
            return other.values
        return other

    def copy(self):
        return self._wrap(self.values.copy())

    def zeros_like(self):
        return self._wrap(np.zeros_like(self.values))

    def with_values(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError("shape mismatch")
        return self._wrap(values)

    def __add__(self, other):
        return self._wrap(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._wrap(self.values - self._other(other))

    def __mul__(self, other):
        return self._wrap(self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._wrap(self.values / self._other(other))

    def __neg__(self):
        return self._wrap(-self.values)

    def abs(self):
        return self._wrap(np.abs(self.values))

    def norm(self):
        return float(np.linalg.norm(self.values))

    def allclose(self, other, **kw):
        return np.allclose(self.values, self._other(other), **kw)


def mlp_layout(sizes, extra=()):
    layout, off = [], 0
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layout.append((f"W{i}", off, (fan_in, fan_out)))
        off += fan_in * fan_out
        layout.append((f"b{i}", off, (fan_out,)))
        off += fan_out
    for name, shp in extra:
        layout.append((name, off, shp))
        off += int(np.prod(shp))
    return layout


def _init_mlp(params, sizes, rng, last_scale):
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if i == n_layers - 1:
            w *= last_scale
        params.view(f"W{i}")[...] = w


@dataclass
class MLPTape:
    params: ParamVector
    inputs: np.ndarray
    hidden: list
    out: np.ndarray


def _mlp_forward(params, n_layers, x):
    hidden = []
    h = x
    for i in range(n_layers - 1):
        h = np.tanh(h @ params.view(f"W{i}") + params.view(f"b{i}"))
        hidden.append(h)
    out = h @ params.view(f"W{n_layers - 1}") + params.view(f"b{n_layers - 1}")
    return out, hidden


def _mlp_backward(params, n_layers, x, hidden, g_out, grad):
    """Accumulate into ``grad`` (a ParamVector) and return the input cotangent."""
    g = g_out
    for i in range(n_layers - 1, -1, -1):
        inp = hidden[i - 1] if i > 0 else x
        grad.view(f"W{i}")[...] += inp.T @ g
        grad.view(f"b{i}")[...] += g.sum(axis=0)
        g = g @ params.view(f"W{i}").T
        if i > 0:
            g = g * (1.0 - hidden[i - 1] ** 2)
    return g


class _Net:
    kind = ""

    def __init__(self, sizes, extra, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        self.n_layers = len(self.sizes) - 1
        layout = mlp_layout(self.sizes, extra)
        if params is None:
            params = ParamVector.zeros(layout)
        elif not isinstance(params, ParamVector):
            params = ParamVector(params, layout)
        elif params.layout != tuple(ParamVector.zeros(layout).layout):
            raise ValueError("parameter layout does not match architecture")
        self.params = params

    @property
    def obs_dim(self):
        return self.sizes[0]

    @property
    def architecture(self) -> str:
        return f"{self.kind} mlp {'-'.join(map(str, self.sizes))} tanh"

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = self.params.copy()
        return new


class PolicyNet(_Net):
    """Gaussian policy: tanh-squashed mean, state-independent log std."""

    kind = "policy"

    def __init__(self, obs_dim, act_dim, hidden=(64, 64), params=None, seed=None):
        super().__init__((obs_dim, *hidden, act_dim), [("log_std", (act_dim,))], params)
        self.act_dim = int(act_dim)
        if params is None:
            rng = np.random.default_rng(seed)
            _init_mlp(self.params, self.sizes, rng, last_scale=0.01)
            self.params.view("log_std")[...] = LOG_STD_INIT

    def log_std(self, params=None):
        p = self.params if params is None else params
        return np.clip(p.view("log_std"), LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs, params=None):
        p = self.params if params is None else params
        out, _ = _mlp_forward(p, self.n_layers, np.asarray(obs, dtype=float))
        return np.tanh(out)


class CriticNet(_Net):
    kind = "critic"

    def __init__(self, obs_dim, hidden=(64, 64), params=None, seed=None):
        super().__init__((obs_dim, *hidden, 1), [], params)
        if params is None:
            rng = np.random.default_rng(seed)
            _init_mlp(self.params, self.sizes, rng, last_scale=1.0)


@dataclass
class PolicyTape:
    mlp: MLPTape
    mean: np.ndarray
    log_std: np.ndarray
    std: np.ndarray
    noise: np.ndarray


def policy_forward(net: PolicyNet, obs, noise, params: ParamVector | None = None):
    """Reparameterised sample ``tanh(mlp(obs)) + exp(log_std) * noise``.

    ``params`` overrides the net's own parameters without mutating it.
    """
    p = net.params if params is None else params
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    noise = np.asarray(noise, dtype=float).reshape(obs.shape[0], net.act_dim)
    out, hidden = _mlp_forward(p, net.n_layers, obs)
    mean = np.tanh(out)
    log_std = net.log_std(p)
    std = np.exp(log_std)
    action = mean + std * noise
    return action, PolicyTape(MLPTape(p, obs, hidden, out), mean, log_std, std, noise)


def policy_backward_parts(net: PolicyNet, tape: PolicyTape, g_mean, g_log_std):
    """Gradient from cotangents on the squashed mean and on the (clamped) log std."""
    mt = tape.mlp
    grad = mt.params.zeros_like()
    g_out = np.asarray(g_mean, dtype=float) * (1.0 - tape.mean ** 2)
    g_obs = _mlp_backward(mt.params, net.n_layers, mt.inputs, mt.hidden, g_out, grad)
    raw = mt.params.view("log_std")
    inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    grad.view("log_std")[...] += np.where(inside, g_log_std, 0.0)
    return grad, g_obs


def policy_backward(net: PolicyNet, tape: PolicyTape, g_action):
    g_action = np.asarray(g_action, dtype=float).reshape(tape.mean.shape)
    g_log_std = (g_action * tape.std * tape.noise).sum(axis=0)
    return policy_backward_parts(net, tape, g_action, g_log_std)


def gaussian_log_prob(action, mean, log_std):
    std = np.exp(log_std)
    z = (action - mean) / std
    return np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2.0 * math.pi), axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * math.log(2.0 * math.pi * math.e)))


@dataclass
class CriticTape:
    mlp: MLPTape


def critic_forward(net: CriticNet, obs, params: ParamVector | None = None):
    p = net.params if params is None else params
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    out, hidden = _mlp_forward(p, net.n_layers, obs)
    return out[:, 0], CriticTape(MLPTape(p, obs, hidden, out))


def critic_backward(net: CriticNet, tape: CriticTape, g_value):
    mt = tape.mlp
    grad = mt.params.zeros_like()
    g_out = np.asarray(g_value, dtype=float).reshape(-1, 1)
    g_obs = _mlp_backward(mt.params, net.n_layers, mt.inputs, mt.hidden, g_out, grad)
    return grad, g_obs


def backward(net, tape, upstream):
    """Dispatch to the right reverse pass; returns ``(param_grad, obs_cotangent)``."""
    if isinstance(tape, PolicyTape):
        return policy_backward(net, tape, upstream)
    if isinstance(tape, CriticTape):
        return critic_backward(net, tape, upstream)
    raise TypeError(f"unsupported tape {type(tape).__name__}")


# -- checkpoint text format ----------------------------------------------

def dumps_checkpoint(header: dict, vectors: dict) -> str:
    """Serialise a header and named ParamVectors to text.

    Floats use shortest round-trip ``repr`` so loading is exact.
    """
    lines = [f"rl-lab-checkpoint {CHECKPOINT_VERSION}"]
    for key in sorted(header):
        value = str(header[key])
        if "\n" in value:
            raise ValueError(f"header value for {key!r} must be single-line")
        lines.append(f"{key}: {value}")
    for name, pv in vectors.items():
        shapes = ";".join(f"{n}={'x'.join(map(str, shp))}" for n, _, shp in pv.layout)
        lines.append(f"[{name}] {len(pv)} {shapes}")
        lines.extend(repr(float(x)) for x in pv.values)
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("rl-lab-checkpoint "):
        raise ValueError("not an rl-lab checkpoint")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header, vectors = {"format_version": version}, {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        key, _, value = lines[i].partition(": ")
        header[key] = value
        i += 1
    while i < len(lines):
        tag, count, shapes = lines[i].split(" ", 2)
        name, count = tag[1:-1], int(count)
        layout, off = [], 0
        for item in shapes.split(";"):
            lname, dims = item.split("=")
            shp = tuple(int(d) for d in dims.split("x"))
            layout.append((lname, off, shp))
            off += int(np.prod(shp))
        values = np.array([float(x) for x in lines[i + 1:i + 1 + count]])
        vectors[name] = ParamVector(values, layout)
        i += 1 + count
    return header, vectors

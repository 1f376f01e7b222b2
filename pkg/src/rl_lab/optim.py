"""Adam and the adaptive sharpness-aware (ASAM) two-step update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nets import ParamVector

log = logging.getLogger(__name__)


class DegenerateGeometry(RuntimeWarning):
    """The scaled gradient ``|theta| * g`` vanished; no ascent direction."""


@dataclass
class AdamState:
    m: np.ndarray
    v_hat: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0, lr, beta1, beta2, eps)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState, lr: float | None = None):
    """Bias-corrected Adam; mutates ``state`` and returns the new parameters."""
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=float)
    if g.shape != params.values.shape:
        raise ValueError("gradient and parameter layouts differ")
    lr = state.lr if lr is None else lr
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v_hat = b2 * state.v_hat + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** state.step_count)
    v_hat = state.v_hat / (1.0 - b2 ** state.step_count)
    return params.with_values(params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps))


@dataclass
class SGDState:
    """Plain gradient descent; handy as a transparent base optimizer in checks."""

    lr: float = 1e-2
    step_count: int = 0


def sgd_step(params: ParamVector, grad: ParamVector, state: SGDState, lr: float | None = None):
    state.step_count += 1
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=float)
    return params.with_values(params.values - (state.lr if lr is None else lr) * g)


def base_step(params, grad, state, lr=None):
    if isinstance(state, AdamState):
        return adam_step(params, grad, state, lr)
    if isinstance(state, SGDState):
        return sgd_step(params, grad, state, lr)
    raise TypeError(f"unknown optimizer state {type(state).__name__}")


def clip_grad_norm(grad: ParamVector, max_norm: float = 1.0):
    """Rescale to global 2-norm ``max_norm`` if larger; returns ``(grad, norm)``."""
    norm = grad.norm()
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


@dataclass
class AsamConfig:
    rho: float = 0.75
    weight_decay: float = 0.0
    denom_floor: float = 1e-12
    degenerate_events: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def asam_perturb(params: ParamVector, grad: ParamVector, cfg: AsamConfig) -> ParamVector:
    """Ascent step ``rho * |theta|^2 g / ||theta g||_2`` (p = 2, T = diag|theta|).

    Falls back to a zero perturbation when the scaled gradient norm is below
    ``cfg.denom_floor``; the event is counted on ``cfg`` and logged.
    """
    theta = params.values
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient passed to asam_perturb")
    tg = np.abs(theta) * g
    denom = float(np.linalg.norm(tg))
    if denom < cfg.denom_floor:
        cfg.degenerate_events += 1
        log.warning("degenerate ASAM geometry: ||T g|| = %.3g", denom)
        return params.zeros_like()
    return params.with_values(cfg.rho * np.abs(theta) * tg / (denom + cfg.denom_floor))


def asam_update(params: ParamVector, grad_at_perturbed: ParamVector, state, cfg: AsamConfig, lr=None):
    """Base-optimizer step on ``grad(theta + eps) + weight_decay * theta``.

    ``params`` is the unperturbed theta; the caller evaluated the gradient at
    ``theta + eps``.
    """
    effective = grad_at_perturbed + cfg.weight_decay * params.values if cfg.weight_decay else grad_at_perturbed
    return base_step(params, effective, state, lr)

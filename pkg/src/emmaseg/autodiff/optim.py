"""First-order optimizers operating on named parameter tensors in place."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, DimensionError, NonFiniteError
from .tensor import Tensor

DEFAULTS: dict[str, dict[str, float]] = {
    "sgd_momentum": {"lr": 0.01, "momentum": 0.9, "weight_decay": 0.0},
    "rmsprop": {"lr": 1e-3, "rho": 0.9, "eps": 1e-8, "weight_decay": 0.0},
    "adam": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0},
    "adadelta": {"lr": 1.0, "rho": 0.95, "eps": 1e-6, "weight_decay": 0.0},
}


@dataclass
class OptimizerState:
    algorithm: str
    hyper: dict[str, float]
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def make_optimizer(algorithm: str, **hyper) -> OptimizerState:
    if algorithm not in DEFAULTS:
        raise ConfigError(f"unknown optimizer {algorithm!r}; choose from {sorted(DEFAULTS)}")
    unknown = set(hyper) - set(DEFAULTS[algorithm])
    if unknown:
        raise ConfigError(f"unknown {algorithm} hyperparameters: {sorted(unknown)}")
    merged = {**DEFAULTS[algorithm], **{k: float(v) for k, v in hyper.items()}}
    if merged["lr"] <= 0:
        raise ConfigError(f"learning rate must be > 0, got {merged['lr']}")
    return OptimizerState(algorithm, merged)


def _slot(state: OptimizerState, name: str, key: str, like: np.ndarray) -> np.ndarray:
    per = state.slots.setdefault(name, {})
    if key not in per:
        per[key] = np.zeros_like(like)
    return per[key]


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor],
                   grads: Mapping[str, np.ndarray]) -> None:
    """Apply one update of ``state.algorithm`` to every parameter in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    h = state.hyper
    lr, wd, t = h["lr"], h["weight_decay"], state.step
    for name in sorted(grads):
        p = params[name].data
        g = grads[name].astype(p.dtype, copy=False)
        if wd:
            g = g + wd * p
        if state.algorithm == "sgd_momentum":
            v = _slot(state, name, "velocity", p)
            v *= h["momentum"]
            v -= lr * g
            p += v
        elif state.algorithm == "rmsprop":
            s = _slot(state, name, "sq", p)
            s *= h["rho"]
            s += (1.0 - h["rho"]) * g * g
            p -= lr * g / (np.sqrt(s) + h["eps"])
        elif state.algorithm == "adam":
            m = _slot(state, name, "m", p)
            v = _slot(state, name, "v", p)
            m *= h["beta1"]
            m += (1.0 - h["beta1"]) * g
            v *= h["beta2"]
            v += (1.0 - h["beta2"]) * g * g
            m_hat = m / (1.0 - h["beta1"] ** t)
            v_hat = v / (1.0 - h["beta2"] ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + h["eps"])
        else:  # adadelta
            eg = _slot(state, name, "grad_sq", p)
            ex = _slot(state, name, "delta_sq", p)
            eg *= h["rho"]
            eg += (1.0 - h["rho"]) * g * g
            delta = -np.sqrt(ex + h["eps"]) / np.sqrt(eg + h["eps"]) * g
            ex *= h["rho"]
            ex += (1.0 - h["rho"]) * delta * delta
            p += lr * delta

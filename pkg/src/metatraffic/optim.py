"""First-order optimizers over named parameter arrays.

Both optimizers return fresh arrays and never mutate their inputs, so
parameters captured by a live tape keep their forward values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

Params = dict[str, np.ndarray]


def _check_keys(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameter(s): {', '.join(missing)}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Params:
    """Plain gradient descent: ``p - lr * g`` for every parameter."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check_keys(params, grads)
    return {k: p - lr * np.asarray(grads[k]) for k, p in params.items()}


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Params:
    """Bias-corrected Adam. Advances ``state`` (moments, step) and returns new params."""
    _check_keys(params, grads)
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    out: Params = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out

"""SGD with momentum and Adam over :class:`~prcnn.model.ModelParams` records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prcnn.errors import ArgumentError


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ArgumentError(f"unknown optimizer {self.kind!r}")


def sgd_apply(params, grads, state: OptimizerState):
    """In-place momentum SGD: v <- momentum*v + g; p <- p - lr*v."""
    params.check_parity(grads)
    for name, p in params.tensors.items():
        g = grads[name]
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        p -= state.learning_rate * v
    state.step_count += 1
    return params


def adam_apply(params, grads, state: OptimizerState):
    params.check_parity(grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.tensors.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


def apply(params, grads, state: OptimizerState):
    if state.kind == "sgd":
        return sgd_apply(params, grads, state)
    return adam_apply(params, grads, state)


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.tensors.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.tensors.values():
            g *= scale
    return norm

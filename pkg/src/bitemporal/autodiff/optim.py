"""SGD with momentum and AdamW, updating a ParamSet in place."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import DTYPE, ParamSet


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimState:
    step: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def buffer(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        slot = self.buffers.setdefault(name, {})
        if key not in slot:
            slot[key] = np.zeros_like(like, dtype=DTYPE)
        return slot[key]


def _grads(params: ParamSet):
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
        yield name, p, p.grad


def sgd_momentum_step(params: ParamSet, state: OptimState, lr: float,
                      momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """v <- mu v + (g + wd p);  p <- p - lr v."""
    grads = list(_grads(params))
    state.step += 1
    lr, momentum, weight_decay = DTYPE(lr), DTYPE(momentum), DTYPE(weight_decay)
    for name, p, g in grads:
        v = state.buffer(name, "momentum", p.value)
        d = g + weight_decay * p.value if weight_decay else g
        v *= momentum
        v += d
        p.value -= lr * v


def adamw_step(params: ParamSet, state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, weight_decay: float = 0.01, eps: float = 1e-8) -> None:
    """Adam with bias-corrected moments and decoupled weight decay."""
    grads = list(_grads(params))
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p, g in grads:
        m = state.buffer(name, "m", p.value)
        v = state.buffer(name, "v", p.value)
        m *= DTYPE(beta1)
        m += DTYPE(1.0 - beta1) * g
        v *= DTYPE(beta2)
        v += DTYPE(1.0 - beta2) * g * g
        if weight_decay:
            p.value -= DTYPE(lr * weight_decay) * p.value
        update = (m / DTYPE(c1)) / (np.sqrt(v / DTYPE(c2)) + DTYPE(eps))
        p.value -= DTYPE(lr) * update

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-3,
                     dtype=np.float64) -> np.ndarray:
    """Central differences of a scalar function, one entry at a time."""
    x = np.array(x, dtype=dtype)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi_x = float(flat[k])
        hi = float(f(Tensor(x.copy())).value)
        flat[k] = orig - eps
        lo_x = float(flat[k])
        lo = float(f(Tensor(x.copy())).value)
        flat[k] = orig
        grad.reshape(-1)[k] = (hi - lo) / (hi_x - lo_x)
    return grad


def gradient_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3,
                   dtype=np.float64) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Per entry the error is |a - n| / (|a| + |n| + 1e-8). `dtype` sets the
    precision of the probed input; pass np.float32 to check the 32-bit path.
    """
    x = np.array(x.value if isinstance(x, Tensor) else x, dtype=dtype)
    t = Tensor(x.copy(), requires_grad=True)
    out = f(t)
    out.backward()
    analytic = np.zeros(x.shape) if t.grad is None else t.grad.astype(np.float64)
    numeric = numeric_gradient(f, x, eps, dtype)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0

"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences; ``fn`` must read ``param.data``."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list:
    reset_tape()
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(max|a|, max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backward and central differences over ``params``."""
    got = analytic_grads(fn, params)
    return max(relative_error(g, numerical_grad(fn, p, h)) for g, p in zip(got, params))

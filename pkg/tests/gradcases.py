"""Gradient-check cases covering every differentiable op, shared by the unit and acceptance suites."""
import numpy as np

from emef.autodiff import (
    Tensor,
    bce_with_logits,
    box_mean,
    concat_channels,
    conv2d,
    conv2d_modulated,
    instance_norm,
    leaky_relu,
    linear,
    nearest_upsample_2x,
    relu,
    sigmoid,
    tanh,
)
from emef.autodiff import functional as F


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_cases(rng):
    x = leaf(rng, 2, 3, 4, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    row = leaf(rng, 4)
    w = leaf(rng, 4, 3, 3, 3)
    bias = leaf(rng, 4)
    xm = leaf(rng, 1, 3, 5, 5)
    wm = leaf(rng, 2, 3, 3, 3)
    s = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    gam = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    bet = leaf(rng, 3)
    lw = leaf(rng, 5, 4)
    lb = leaf(rng, 5)
    big = leaf(rng, 1, 2, 9, 9)
    # nudge away from relu kinks
    x.data[np.abs(x.data) < 1e-2] += 0.05
    return {
        "add": (lambda: ((a + row) * b).sum(), [a, b, row]),
        "sub": (lambda: ((a - row) * b).sum(), [a, row]),
        "mul": (lambda: (a * b * row).sum(), [a, b, row]),
        "div": (lambda: (a / pos).sum(), [a, pos]),
        "power": (lambda: (pos ** 1.7).sum(), [pos]),
        "sqrt_exp_log": (lambda: (F.sqrt(pos) + F.exp(a * 0.3) + F.log(pos)).sum(), [pos, a]),
        "relu": (lambda: (relu(x) * x).sum(), [x]),
        "leaky_relu": (lambda: (leaky_relu(x, 0.2) * x).sum(), [x]),
        "tanh": (lambda: (tanh(a) * b).sum(), [a, b]),
        "sigmoid": (lambda: (sigmoid(a) * b).sum(), [a, b]),
        "mean_axes": (lambda: (x.mean(axis=(2, 3)) ** 2).sum(), [x]),
        "reshape_matmul": (lambda: (a.reshape(4, 3) @ b).sum(), [a, b]),
        "linear": (lambda: (linear(a, lw, lb) ** 2).sum(), [a, lw, lb]),
        "concat": (lambda: (concat_channels([x, x * 2.0]) ** 2).sum(), [x]),
        "upsample": (lambda: (nearest_upsample_2x(x) * nearest_upsample_2x(x)).sum(), [x]),
        "instance_norm": (lambda: (instance_norm(x, gam, bet) * x).sum(), [x, gam, bet]),
        "conv2d": (lambda: (conv2d(x, w, bias, stride=2, pad=1) ** 2).sum(), [x, w, bias]),
        "conv2d_modulated": (lambda: (conv2d_modulated(xm, wm, s, eps=1e-8) ** 2).sum(), [xm, wm, s]),
        "box_mean": (lambda: (box_mean(big, 4, stride=2) ** 2).sum(), [big]),
        "bce_with_logits": (lambda: bce_with_logits(a, 1.0) + bce_with_logits(b * 2.0, 0.0), [a, b]),
    }

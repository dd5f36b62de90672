"""Differentiable operations on :class:`~emef.autodiff.tensor.Tensor`.

Every op computes its forward result with numpy and, when an input requires a
gradient, records a backward rule on the current tape. Convolutions use fixed
row-major im2col reductions so results do not depend on thread scheduling.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, check_finite, make_result


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return make_result(out, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g, needs):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return make_result(x.data ** exponent, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g, needs):
        return (g * 0.5 / out,)

    return make_result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g, needs: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g, needs: (g / x.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def backward(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return make_result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- reductions
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_result(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(x.shape),))


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    return make_result(x.data.astype(dtype), (x,), lambda g, needs: (g.astype(x.dtype),))


# ---------------------------------------------------------------- activations
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g, needs: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g, needs: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g, needs: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g, needs: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- structure
def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape mismatch {t.shape} vs {ref}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g, needs):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return make_result(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def nearest_upsample_2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"nearest_upsample_2x expects NCHW, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g, needs):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def instance_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
                  eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean and unit variance, then apply an affine."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm expects NCHW, got {x.shape}")
    c = x.shape[1]
    for p in (weight, bias):
        if p is not None and p.shape != (c,):
            raise ValueError(f"instance_norm: affine shape {p.shape} != ({c},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gamma = weight.data.reshape(1, c, 1, 1) if weight is not None else 1.0
    out = xhat * gamma
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)
    inputs = tuple(t for t in (x, weight, bias) if t is not None)

    def backward(g, needs):
        grads = []
        gx = g * gamma
        dx = inv * (gx - gx.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gx * xhat).mean(axis=(2, 3), keepdims=True))
        grads.append(dx)
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out.astype(x.dtype), inputs, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight in_features {weight.shape[1]}")
    squeeze = x.ndim == 1
    x2 = reshape(x, (1, -1)) if squeeze else x
    out = matmul(x2, _transpose2d(weight))
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (weight.shape[0],)) if squeeze else out


def _transpose2d(w: Tensor) -> Tensor:
    return make_result(w.data.T.copy(), (w,), lambda g, needs: (g.T.copy(),))


# ---------------------------------------------------------------- convolution
def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, k, k) -> (C*k*k, N*Ho*Wo); spatial axes innermost keeps the copy row-wise
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    cols = cols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def _to_channel_major(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W); free when N == 1."""
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with (Cout, Cin, k, k) ``w`` and zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    n, _, h, wd = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {h}x{wd}")
    check_finite(x, "conv2d input")
    check_finite(w, "conv2d weight")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g, needs):
        gmat = _to_channel_major(g)
        dx = _col2im(wmat.T @ gmat, x.shape, k, stride, pad, ho, wo) if needs[0] else None
        dw = (gmat @ cols.T).reshape(w.shape) if needs[1] else None
        if b is None:
            return dx, dw
        return dx, dw, (gmat.sum(axis=1) if needs[2] else None)

    return make_result(out, inputs, backward)


def modulate_weight(w: Tensor, s: Tensor, eps: float = 1e-8, demodulate: bool = True) -> Tensor:
    """Scale kernel input channels by ``s`` and optionally renormalise each output channel.

    ``w'[i,j] = s[j] * w[i,j]``; with ``demodulate`` the result is divided by
    ``sqrt(sum_{j,k,l} w'[i,j,k,l]**2 + eps)``.
    """
    if w.ndim != 4:
        raise ValueError(f"modulate_weight expects (Cout, Cin, k, k), got {w.shape}")
    if s.shape != (w.shape[1],):
        raise ValueError(f"style length {s.shape} does not match Cin={w.shape[1]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    wm = mul(w, reshape(s, (1, -1, 1, 1)))
    if not demodulate:
        return wm
    norm = sqrt(add(sum(mul(wm, wm), axis=(1, 2, 3), keepdims=True), eps))
    return div(wm, norm)


def conv2d_modulated(x: Tensor, w: Tensor, s: Tensor, eps: float = 1e-8, demodulate: bool = True,
                     b: Optional[Tensor] = None, stride: int = 1, pad: Optional[int] = None,
                     allow_zero_eps: bool = False) -> Tensor:
    """Style-modulated convolution (single sample). ``pad`` defaults to same-size padding.

    ``allow_zero_eps`` admits ``eps == 0`` so exact scale cancellation can be
    checked; production callers keep ``eps > 0``.
    """
    if eps < 0 or (eps == 0 and not allow_zero_eps):
        raise ValueError(f"eps must be > 0, got {eps}")
    if x.shape[0] != 1:
        raise ValueError("conv2d_modulated supports batch size 1 (one style per call)")
    if pad is None:
        pad = w.shape[-1] // 2
    return conv2d(x, modulate_weight(w, s, eps, demodulate), b, stride=stride, pad=pad)


# ---------------------------------------------------------------- filters
def _box_sum_valid(x: np.ndarray, size: int) -> np.ndarray:
    c = np.cumsum(np.cumsum(x, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., size:, size:] - c[..., :-size, size:] - c[..., size:, :-size] + c[..., :-size, :-size]


def box_mean(x: Tensor, size: int, stride: int = 1) -> Tensor:
    """Mean over every ``size`` x ``size`` window (valid positions, given stride) of the last two axes."""
    h, w = x.shape[-2:]
    if size < 1 or size > min(h, w) or stride < 1:
        raise ValueError(f"box_mean: bad window {size}/stride {stride} for {h}x{w}")
    full = _box_sum_valid(x.data, size) / float(size * size)
    out = np.ascontiguousarray(full[..., ::stride, ::stride])
    fh, fw = full.shape[-2:]

    def backward(g, needs):
        scattered = np.zeros(x.shape[:-2] + (fh, fw), dtype=g.dtype)
        scattered[..., ::stride, ::stride] = g
        pad = [(0, 0)] * (x.ndim - 2) + [(size - 1, size - 1), (size - 1, size - 1)]
        return (_box_sum_valid(np.pad(scattered, pad), size) / float(size * size),)

    return make_result(out.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------- losses
def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a constant target in [0, 1]."""
    z = logits.data
    t = float(target)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    count = z.size

    def backward(g, needs):
        return (g * (sig - t) / count,)

    return make_result(np.asarray(per.mean(), dtype=logits.dtype), (logits,), backward)

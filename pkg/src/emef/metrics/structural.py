"""SSIM and MEF-SSIM, usable on numpy images or differentiably on tape tensors.

Numpy inputs are ``(H, W)`` / ``(H, W, 3)`` arrays and give a float. Tensor
inputs are NCHW with ``N == 1`` (the generator's output layout) and give a
scalar :class:`~emef.autodiff.Tensor` that can be back-propagated.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from ..autodiff import Tensor, box_mean, conv2d, no_grad
from ..autodiff import functional as F
from ..imaging import LUMA, luminance_or_gray

ImageLike = Union[np.ndarray, Tensor]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MEF_PATCH = 8
MEF_C2 = 0.03 ** 2
NORM_EPS = 1e-9


@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _planes(img: ImageLike, channels: str, dtype=np.float64) -> Tensor:
    """Bring an image to a ``(C, 1, H, W)`` tensor of luminance or RGB planes (numpy input cast to ``dtype``)."""
    if channels not in ("luminance", "rgb"):
        raise ValueError(f"channels must be 'luminance' or 'rgb', got {channels!r}")
    if isinstance(img, Tensor):
        if img.ndim == 2:
            return img.reshape(1, 1, *img.shape)
        if img.ndim != 4 or img.shape[0] != 1:
            raise ValueError(f"tensor images must be (1, C, H, W), got {img.shape}")
        c, h, w = img.shape[1:]
        if c == 3 and channels == "luminance":
            coeffs = Tensor(LUMA.reshape(1, 3, 1, 1), dtype=img.dtype)
            return (img * coeffs).sum(axis=1, keepdims=True)
        return img.reshape(c, 1, h, w)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3 and channels == "rgb":
        return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)[:, None]), dtype=dtype)
    gray = luminance_or_gray(arr)
    return Tensor(gray[None, None], dtype=dtype)


def _shape_hw(img: ImageLike):
    return img.shape[-2:] if isinstance(img, Tensor) else np.asarray(img).shape[:2]


def ssim(a: ImageLike, b: ImageLike, channels: str = "luminance", data_range: float = 1.0):
    """Gaussian-window SSIM (11x11, sigma 1.5) averaged over valid window positions.

    ``channels='luminance'`` compares Rec. 601 luma; ``'rgb'`` averages the
    per-channel scores. Returns a float for numpy inputs, a scalar tensor if
    either input is a tensor.
    """
    if tuple(_shape_hw(a)) != tuple(_shape_hw(b)):
        raise ValueError(f"ssim: shape mismatch {_shape_hw(a)} vs {_shape_hw(b)}")
    tensors = [t for t in (a, b) if isinstance(t, Tensor)]
    if not tensors:
        with no_grad():
            return float(_ssim_tensor(_planes(a, channels), _planes(b, channels), data_range).data)
    # a numpy operand follows the tensor's precision
    dtype = tensors[0].dtype
    return _ssim_tensor(_planes(a, channels, dtype), _planes(b, channels, dtype), data_range)


def _ssim_tensor(x: Tensor, y: Tensor, data_range: float) -> Tensor:
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"ssim: channel mismatch {x.shape} vs {y.shape}")
    dtype = np.result_type(x.dtype, y.dtype)
    x, y = x.astype(dtype) if x.dtype != dtype else x, y.astype(dtype) if y.dtype != dtype else y
    size = min(SSIM_WINDOW, *x.shape[-2:])
    if size % 2 == 0:
        size -= 1
    win = Tensor(gaussian_window(size, SSIM_SIGMA)[None, None], dtype=dtype)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(t):
        return conv2d(t, win)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = filt(x * x) - mu_xx
    s_yy = filt(y * y) - mu_yy
    s_xy = filt(x * y) - mu_xy
    num = (mu_xy * 2.0 + c1) * (s_xy * 2.0 + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return (num / den).mean()


# ----------------------------------------------------------------- MEF-SSIM
def _source_terms(sources: Sequence[np.ndarray], patch: int, stride: int):
    """Per-patch constants from the sources: scale ``a = c_hat / ||S~||`` and ``mean(S)``, ``S``.

    With ``w_k = ||x~_k||`` the weighted structure ``sum_k w_k x~_k / ||x~_k||``
    is simply ``S~ = sum_k x~_k``, so the desired patch is ``c_hat * S~ / ||S~||``.
    """
    lum = [luminance_or_gray(s) for s in sources]
    n = float(patch * patch)
    with no_grad():
        def bm(arr):
            return box_mean(Tensor(arr[None, None], dtype=np.float64), patch, stride).data[0, 0]

        contrast = []
        for x in lum:
            x = x - x.mean()
            var = np.maximum(bm(x * x) - bm(x) ** 2, 0.0)
            contrast.append(np.sqrt(n * var))
        c_hat = np.max(contrast, axis=0)
        s_img = np.sum(lum, axis=0)
        s_img = s_img - s_img.mean()  # centring keeps the box-filter moments well conditioned
        s_mean = bm(s_img)
        s_norm = np.sqrt(n * np.maximum(bm(s_img * s_img) - s_mean ** 2, 0.0))
    scale = c_hat / np.maximum(s_norm, NORM_EPS)
    return scale, s_img, s_mean, s_norm


def mef_ssim(sources: Sequence[np.ndarray], fused: ImageLike, patch: int = MEF_PATCH, stride: int = 1,
             c2: float = MEF_C2):
    """Multi-exposure SSIM of ``fused`` against the desired patches built from ``sources``.

    For each ``patch`` x ``patch`` window the desired mean-removed patch has the
    largest source contrast and the contrast-weighted source structure; the
    score compares it to the mean-removed fused patch and is averaged over
    windows. Luminance only, so adding a constant to ``fused`` leaves the score
    unchanged. Differentiable with respect to a tensor ``fused``.
    """
    if len(sources) < 2:
        raise ValueError("mef_ssim needs at least two source images")
    shape = tuple(np.asarray(sources[0]).shape[:2])
    for s in sources:
        if tuple(np.asarray(s).shape[:2]) != shape:
            raise ValueError("mef_ssim: sources differ in size")
    if tuple(_shape_hw(fused)) != shape:
        raise ValueError(f"mef_ssim: fused size {tuple(_shape_hw(fused))} != sources {shape}")

    scale, s_img, s_mean, s_norm = _source_terms(sources, patch, stride)
    n = float(patch * patch)
    var_desired = (scale * s_norm) ** 2 / n

    if not isinstance(fused, Tensor):
        with no_grad():
            return float(_mef_score(_planes(fused, "luminance") - 0.5, scale, s_img, s_mean, var_desired,
                                    patch, stride, c2).data)
    y = _planes(fused, "luminance")
    if y.dtype != np.float64:
        y = y.astype(np.float64)
    return _mef_score(y - 0.5, scale, s_img, s_mean, var_desired, patch, stride, c2)


def _mef_score(y: Tensor, scale, s_img, s_mean, var_desired, patch, stride, c2) -> Tensor:
    s_t = Tensor(s_img[None, None])
    mu_y = box_mean(y, patch, stride)
    cov_sy = box_mean(y * s_t, patch, stride) - mu_y * Tensor(s_mean)
    var_y = box_mean(y * y, patch, stride) - mu_y * mu_y
    num = cov_sy * Tensor(2.0 * scale) + c2
    den = var_y + Tensor(var_desired + c2)
    return F.mean(num / den)


def desired_patch(sources: Sequence[np.ndarray], top: int, left: int, patch: int = MEF_PATCH) -> np.ndarray:
    """Mean-removed desired patch at ``(top, left)``, computed literally from its definition."""
    patches = [luminance_or_gray(s)[top:top + patch, left:left + patch] for s in sources]
    centered = [p - p.mean() for p in patches]
    norms = [np.linalg.norm(c) for c in centered]
    c_hat = max(norms)
    struct = sum(w * c / max(nrm, NORM_EPS) for w, c, nrm in zip(norms, centered, norms))
    snorm = np.linalg.norm(struct)
    if snorm < NORM_EPS:
        return np.zeros_like(centered[0])
    return c_hat * struct / snorm

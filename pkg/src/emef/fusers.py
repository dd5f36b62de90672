"""Classical two-exposure fusion algorithms used as the ensemble's imitation targets.

All fusers are deterministic, map an :class:`~emef.imaging.ExposurePair` to an
``(H, W, 3)`` image in [0, 1], and return the source unchanged when both
exposures are identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
from scipy import ndimage

from .imaging import ExposurePair, luminance_or_gray

WELL_EXPOSED_SIGMA = 0.2
NORM_EPS = 1e-12
PYRAMID_LEVELS = 4
BOX_RADIUS = 4
GRADIENT_EPS = 1e-3
GRADIENT_POWER = 3.0

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def normalize_weights(weights: List[np.ndarray], eps: float = NORM_EPS) -> List[np.ndarray]:
    total = np.sum(weights, axis=0) + eps
    return [w / total for w in weights]


def well_exposedness_weights(pair: ExposurePair, sigma: float = WELL_EXPOSED_SIGMA) -> List[np.ndarray]:
    """Per-source Gaussian-of-luminance weights ``exp(-(Y-0.5)^2 / (2 sigma^2))``, normalised."""
    raw = [np.exp(-((luminance_or_gray(img) - 0.5) ** 2) / (2.0 * sigma * sigma)) for img in pair.sources()]
    return normalize_weights(raw)


def _blend(pair: ExposurePair, weights: List[np.ndarray]) -> np.ndarray:
    out = sum(np.asarray(img, dtype=np.float64) * w[..., None] for img, w in zip(pair.sources(), weights))
    return np.clip(out, 0.0, 1.0)


# ----------------------------------------------------------------- pyramids
def _blur(img: np.ndarray) -> np.ndarray:
    out = ndimage.convolve1d(img, _BINOMIAL, axis=0, mode="reflect")
    return ndimage.convolve1d(out, _BINOMIAL, axis=1, mode="reflect")


def _down(img: np.ndarray) -> np.ndarray:
    return _blur(img)[::2, ::2]


def _up(img: np.ndarray, shape) -> np.ndarray:
    up = np.zeros(shape[:2] + img.shape[2:], dtype=img.dtype)
    up[::2, ::2] = img
    return 4.0 * _blur(up)


def gaussian_pyramid(img: np.ndarray, levels: int) -> List[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(_down(pyr[-1]))
    return pyr


def laplacian_pyramid(img: np.ndarray, levels: int) -> List[np.ndarray]:
    gauss = gaussian_pyramid(img, levels)
    pyr = [g - _up(g_next, g.shape) for g, g_next in zip(gauss[:-1], gauss[1:])]
    pyr.append(gauss[-1])
    return pyr


def collapse_pyramid(pyr: List[np.ndarray]) -> np.ndarray:
    img = pyr[-1]
    for lap in reversed(pyr[:-1]):
        img = lap + _up(img, lap.shape)
    return img


def fuse_pyramid(pair: ExposurePair, levels: int = PYRAMID_LEVELS) -> np.ndarray:
    """Multi-resolution blend: Gaussian-pyramid weights times Laplacian-pyramid sources."""
    h, w = pair.shape[:2]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    step = 2 ** (levels - 1)
    if h % step or w % step:
        raise ValueError(f"image size {h}x{w} is not divisible by 2^(levels-1) = {step}")
    weights = well_exposedness_weights(pair)
    blended = None
    for img, wmap in zip(pair.sources(), weights):
        lap = laplacian_pyramid(np.asarray(img, dtype=np.float64), levels)
        gw = gaussian_pyramid(wmap, levels)
        terms = [l_k * g_k[..., None] for l_k, g_k in zip(lap, gw)]
        blended = terms if blended is None else [a + b for a, b in zip(blended, terms)]
    return np.clip(collapse_pyramid(blended), 0.0, 1.0)


# ----------------------------------------------------------------- smoothed weights
def fuse_smoothed(pair: ExposurePair, radius: int = BOX_RADIUS, passes: int = 3) -> np.ndarray:
    """Well-exposedness weights refined by an iterated box filter, renormalised, then blended."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    weights = well_exposedness_weights(pair)
    if radius > 0:
        smoothed = []
        for w in weights:
            for _ in range(passes):
                w = ndimage.uniform_filter(w, size=2 * radius + 1, mode="reflect")
            smoothed.append(w)
        weights = normalize_weights(smoothed)
    return _blend(pair, weights)


# ----------------------------------------------------------------- gradient weights
def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def fuse_gradient(pair: ExposurePair, eps: float = GRADIENT_EPS, power: float = GRADIENT_POWER) -> np.ndarray:
    """Weights ``(Sobel magnitude + eps) ** power`` times well-exposedness.

    ``power > 1`` sharpens the preference for the locally more detailed
    exposure; with ``power == 1`` the weights are plain gradient magnitudes.
    """
    expo = well_exposedness_weights(pair)
    grads = [(sobel_magnitude(luminance_or_gray(img)) + eps) ** power for img in pair.sources()]
    raw = np.array([g * e for g, e in zip(grads, expo)])
    # products can be ~1e-10 in flat regions; rescale per pixel so the eps in the normaliser stays negligible
    raw /= np.maximum(raw.max(axis=0), np.finfo(np.float64).tiny)
    return _blend(pair, normalize_weights(list(raw)))


# ----------------------------------------------------------------- plain average
def fuse_average(pair: ExposurePair, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Per-pixel well-exposedness average followed by a 1-99 percentile contrast stretch."""
    fused = _blend(pair, well_exposedness_weights(pair))
    lo, hi = np.percentile(fused, [low_pct, high_pct])
    if hi - lo < 1e-6:
        return fused
    return np.clip((fused - lo) / (hi - lo), 0.0, 1.0)


# ----------------------------------------------------------------- registry
@dataclass(frozen=True)
class FuserId:
    index: int
    name: str


_REGISTRY: Dict[int, tuple] = {
    0: ("pyramid", fuse_pyramid),
    1: ("smoothed", fuse_smoothed),
    2: ("gradient", fuse_gradient),
    3: ("average", fuse_average),
}


def registry() -> List[FuserId]:
    return [FuserId(i, name) for i, (name, _) in sorted(_REGISTRY.items())]


def get_fuser(fuser) -> Callable[[ExposurePair], np.ndarray]:
    index = fuser.index if isinstance(fuser, FuserId) else fuser
    if isinstance(index, str):
        names = {name: i for i, (name, _) in _REGISTRY.items()}
        if index not in names:
            raise KeyError(f"unknown fuser {index!r}; known: {sorted(names)}")
        index = names[index]
    if index not in _REGISTRY:
        raise KeyError(f"unknown fuser id {index!r}; registered ids are 0..{len(_REGISTRY) - 1}")
    return _REGISTRY[index][1]


def run_target(fuser, pair: ExposurePair) -> np.ndarray:
    """Run ensemble member ``fuser`` (a :class:`FuserId`, index, or name) on ``pair``."""
    return get_fuser(fuser)(pair)


def run_all_targets(pair: ExposurePair) -> List[np.ndarray]:
    return [run_target(f, pair) for f in registry()]

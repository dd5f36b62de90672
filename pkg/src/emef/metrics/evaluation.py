"""Non-differentiable fusion quality metrics for reports.

All metrics work on luminance. Histogram metrics use 256 byte bins; gradient
metrics (AG, EI, SF) are expressed on the 0-255 intensity scale common in the
fusion literature.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from ..imaging import luminance_or_gray, quantize

PSNR_CAP = 100.0
CE_EPS = 1e-12

# Edge-preservation sigmoid constants (gradient strength, orientation).
QG_GAMMA, QG_KAPPA, QG_SIGMA = 0.9994, 15.0, 0.5
QA_GAMMA, QA_KAPPA, QA_SIGMA = 0.9879, 22.0, 0.8


def _gray(img) -> np.ndarray:
    return luminance_or_gray(img)


def histogram(img) -> np.ndarray:
    counts = np.bincount(quantize(_gray(img)).ravel(), minlength=256).astype(np.float64)
    return counts / counts.sum()


def entropy_en(img) -> float:
    """Shannon entropy (bits) of the 256-bin luminance histogram."""
    p = histogram(img)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def cross_entropy_ce(sources: Sequence, fused) -> float:
    """Mean over sources of ``sum p_s log2(p_s / p_f)``; lower is better."""
    q = np.maximum(histogram(fused), CE_EPS)
    vals = []
    for src in sources:
        p = histogram(src)
        mask = p > 0
        vals.append(float((p[mask] * np.log2(p[mask] / q[mask])).sum()))
    return float(np.mean(vals))


def psnr_fusion(sources: Sequence, fused) -> float:
    """Mean over sources of ``10 log10(1 / MSE)``, each capped at 100 dB."""
    f = _gray(fused)
    vals = []
    for src in sources:
        mse = float(np.mean((_gray(src) - f) ** 2))
        vals.append(PSNR_CAP if mse <= 0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))
    return float(np.mean(vals))


def avg_gradient_ag(img) -> float:
    g = _gray(img) * 255.0
    dx = g[:-1, 1:] - g[:-1, :-1]
    dy = g[1:, :-1] - g[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def _sobel(g: np.ndarray):
    return ndimage.sobel(g, axis=1, mode="nearest"), ndimage.sobel(g, axis=0, mode="nearest")


def edge_intensity_ei(img) -> float:
    gx, gy = _sobel(_gray(img) * 255.0)
    return float(np.mean(np.hypot(gx, gy)))


def spatial_frequency_sf(img) -> float:
    g = _gray(img) * 255.0
    rf = np.sqrt(np.mean((g[:, 1:] - g[:, :-1]) ** 2))
    cf = np.sqrt(np.mean((g[1:, :] - g[:-1, :]) ** 2))
    return float(np.hypot(rf, cf))


def _edge_preservation(src: np.ndarray, fused_g: np.ndarray, fused_a: np.ndarray):
    sx, sy = _sobel(src)
    g_s = np.hypot(sx, sy)
    a_s = np.arctan(sy / np.where(sx == 0, 1e-12, sx))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(g_s > fused_g, fused_g / g_s, g_s / fused_g)
    rel = np.where((g_s == 0) & (fused_g == 0), 1.0, np.nan_to_num(rel, nan=0.0))
    orient = 1.0 - np.abs(a_s - fused_a) / (np.pi / 2.0)
    # Gamma constants normalise each sigmoid to unity at perfect preservation.
    q_g = 1.0 / (1.0 + np.exp(-QG_KAPPA * (rel - QG_SIGMA))) / QG_GAMMA
    q_a = 1.0 / (1.0 + np.exp(-QA_KAPPA * (orient - QA_SIGMA))) / QA_GAMMA
    return np.minimum(q_g, 1.0) * np.minimum(q_a, 1.0), g_s


def qabf(sources: Sequence, fused) -> float:
    """Gradient-based edge-preservation index (Sobel strength and orientation, weights = strength)."""
    if len(sources) < 2:
        raise ValueError("qabf needs at least two sources")
    f = _gray(fused)
    fx, fy = _sobel(f)
    f_g = np.hypot(fx, fy)
    f_a = np.arctan(fy / np.where(fx == 0, 1e-12, fx))
    num = 0.0
    den = 0.0
    for src in sources:
        q, w = _edge_preservation(_gray(src), f_g, f_a)
        num += float((q * w).sum())
        den += float(w.sum())
    return num / den if den > 0 else 0.0


METRICS = {
    "EN": (lambda sources, fused: entropy_en(fused), True),
    "CE": (cross_entropy_ce, False),
    "PSNR": (psnr_fusion, True),
    "AG": (lambda sources, fused: avg_gradient_ag(fused), True),
    "EI": (lambda sources, fused: edge_intensity_ei(fused), True),
    "SF": (lambda sources, fused: spatial_frequency_sf(fused), True),
    "QABF": (qabf, True),
}
"""name -> (fn(sources, fused), higher_is_better)."""

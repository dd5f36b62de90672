"""Fusion quality metrics: differentiable SSIM / MEF-SSIM and report metrics."""
from .evaluation import (
    avg_gradient_ag,
    cross_entropy_ce,
    edge_intensity_ei,
    entropy_en,
    psnr_fusion,
    qabf,
    spatial_frequency_sf,
)
from .report import DEFAULT_METRICS, METRICS, MetricReport, build_report, competition_rank, rank_scores, score_images
from .structural import desired_patch, mef_ssim, ssim

__all__ = [
    "DEFAULT_METRICS", "METRICS", "MetricReport", "avg_gradient_ag", "build_report", "competition_rank",
    "cross_entropy_ce", "desired_patch", "edge_intensity_ei", "entropy_en", "mef_ssim", "psnr_fusion",
    "qabf", "rank_scores", "score_images", "spatial_frequency_sf", "ssim",
]

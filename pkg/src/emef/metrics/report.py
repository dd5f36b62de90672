"""Ranked metric tables: competition ranks per metric, overall rank = sum of ranks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .evaluation import METRICS as _EVAL_METRICS
from .structural import mef_ssim, ssim


def _ssim_to_sources(sources, fused) -> float:
    return float(np.mean([ssim(src, fused) for src in sources]))


def _mef_ssim(sources, fused) -> float:
    return mef_ssim(sources, fused)


METRICS = {"SSIM": (_ssim_to_sources, True), "MEF-SSIM": (_mef_ssim, True), **_EVAL_METRICS}
"""All report metrics: name -> (fn(sources, fused), higher_is_better)."""

DEFAULT_METRICS = ("SSIM", "MEF-SSIM", "CE", "EN", "PSNR", "AG", "EI", "SF", "QABF")


def competition_rank(values: Sequence[float], higher_is_better: bool) -> List[int]:
    """"1224" ranking: tied scores share the best rank, the next rank skips."""
    vals = np.asarray(values, dtype=np.float64)
    key = -vals if higher_is_better else vals
    return [int(np.sum(key < k)) + 1 for k in key]


@dataclass
class MetricReport:
    metrics: List[str]
    scores: Dict[str, Dict[str, float]]
    ranks: Dict[str, Dict[str, int]] = field(default_factory=dict)
    overall: Dict[str, int] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @property
    def methods(self) -> List[str]:
        return list(self.scores)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["method"]
        for m in self.metrics:
            header += [m, f"{m}_rank"]
        writer.writerow(header + ["overall_rank"])
        for name in self.methods:
            row = [name]
            for m in self.metrics:
                row += [f"{self.scores[name][m]:.6f}", self.ranks[name][m]]
            writer.writerow(row + [self.overall[name]])
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table, one method per row, ``score(rank)`` cells, overall rank last."""
        header = ["Method"] + list(self.metrics) + ["Overall"]
        rows = [header]
        for name in self.methods:
            cells = [name] + [f"{self.scores[name][m]:.4f}({self.ranks[name][m]})" for m in self.metrics]
            rows.append(cells + [str(self.overall[name])])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines + [f"NOTE: {n}" for n in self.notes]) + "\n"


def rank_scores(scores: Mapping[str, Mapping[str, float]], metrics: Optional[Sequence[str]] = None,
                directions: Optional[Mapping[str, bool]] = None) -> MetricReport:
    """Rank precomputed ``scores[method][metric]``; ``directions[metric]`` is True if higher is better."""
    if len(scores) < 1:
        raise ValueError("report needs at least one method")
    names = list(scores)
    metrics = list(metrics) if metrics is not None else list(next(iter(scores.values())))
    directions = dict(directions or {})
    report = MetricReport(metrics, {n: {m: float(scores[n][m]) for m in metrics} for n in names})
    report.ranks = {n: {} for n in names}
    for m in metrics:
        higher = directions.get(m, METRICS[m][1] if m in METRICS else True)
        for n, r in zip(names, competition_rank([report.scores[n][m] for n in names], higher)):
            report.ranks[n][m] = r
    report.overall = {n: int(sum(report.ranks[n].values())) for n in names}
    return report


def score_images(sources_per_pair: Sequence[Sequence[np.ndarray]], fused_per_pair: Sequence[np.ndarray],
                 metrics: Sequence[str] = DEFAULT_METRICS) -> Dict[str, float]:
    """Mean of each metric over pairs."""
    if len(sources_per_pair) != len(fused_per_pair):
        raise ValueError("need one fused image per source pair")
    out = {}
    for m in metrics:
        fn = METRICS[m][0]
        out[m] = float(np.mean([fn(src, fused) for src, fused in zip(sources_per_pair, fused_per_pair)]))
    return out


def build_report(methods: Mapping[str, object], sources, metrics: Sequence[str] = DEFAULT_METRICS) -> MetricReport:
    """Score and rank methods.

    ``methods`` maps a name to one fused image (then ``sources`` is one list of
    source images) or to a list of fused images (then ``sources`` is a list of
    per-pair source lists).
    """
    if len(methods) < 1:
        raise ValueError("report needs at least one method")
    scores = {}
    for name, fused in methods.items():
        if isinstance(fused, np.ndarray):
            scores[name] = score_images([sources], [fused], metrics)
        else:
            scores[name] = score_images(sources, list(fused), metrics)
    return rank_scores(scores, metrics)

"""Stage two: per-pair search over the style code that maximises MEF-SSIM of the generator output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, no_grad, reset_tape
from .fusers import run_all_targets
from .imaging import ExposurePair, PathLike, atomic_write_bytes
from .imitator import Generator, tensor_to_image
from .metrics import mef_ssim
from .training import target_code

MODES = ("style_code", "latent_code", "pick_gt", "pick_imitation")


@dataclass(frozen=True)
class TunerConfig:
    alpha0: float = 0.05
    steps: int = 60
    decay_window: int = 20
    tol: float = 1e-4
    patience: int = 5
    mode: str = "style_code"

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be > 0")
        if self.steps < 1 or self.decay_window < 1 or self.patience < 1:
            raise ValueError("steps, decay_window and patience must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")


def step_size(t: int, config: TunerConfig) -> float:
    """Linear decay inside each window; every restart begins at half the previous amplitude."""
    window, pos = divmod(t, config.decay_window)
    return config.alpha0 * 0.5 ** window * (1.0 - pos / config.decay_window)


@dataclass
class TuneResult:
    best_code: np.ndarray
    best_image: np.ndarray
    trace: List[dict] = field(default_factory=list)
    iterations_used: int = 0
    mode: str = "style_code"

    @property
    def best_loss(self) -> float:
        return min(row["loss"] for row in self.trace)

    @property
    def initial_loss(self) -> float:
        return self.trace[0]["loss"]

    def best_so_far(self) -> List[float]:
        return list(np.minimum.accumulate([row["loss"] for row in self.trace]))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n = len(self.trace[0]["code"]) if self.trace else 0
        writer.writerow(["iteration", "loss", "alpha"] + [f"c{i}" for i in range(n)])
        for row in self.trace:
            writer.writerow([row["iteration"], f"{row['loss']:.10f}", f"{row['alpha']:.8g}"]
                            + [f"{v:.8f}" for v in row["code"]])
        return buf.getvalue()


def _check_pair(pair: ExposurePair, gen: Generator) -> None:
    if gen is None:
        raise ValueError("no generator loaded")
    size = gen.config.size
    if pair.shape[:2] != (size, size):
        raise ValueError(f"pair {pair.name!r} is {pair.shape[:2]}, generator expects {size}x{size}")


def tune(pair: ExposurePair, gen: Generator, config: TunerConfig = TunerConfig(),
         init: Optional[np.ndarray] = None) -> TuneResult:
    """Gradient descent on ``1 - MEF-SSIM(sources, G(pair, c))`` starting from the all-ones code.

    ``mode='latent_code'`` searches the latent directly, starting from the
    latent of the all-ones code. The generator weights are frozen. Returns the
    best code seen, not the last.
    """
    _check_pair(pair, gen)
    if config.mode not in ("style_code", "latent_code"):
        raise ValueError(f"tune handles style_code/latent_code, got {config.mode!r}")
    gen.requires_grad_(False)
    sources = pair.sources()
    over, under = pair.over, pair.under
    latent_mode = config.mode == "latent_code"
    if init is not None:
        code = np.asarray(init, dtype=gen.dtype).copy()
    else:
        code = np.ones(gen.config.n_styles, dtype=gen.dtype)
        if latent_mode:
            with no_grad():
                code = gen.map_style(code).data.copy()

    def forward(c: Tensor) -> Tensor:
        return gen.forward_latent(over, under, c) if latent_mode else gen(over, under, c)

    result = TuneResult(code.copy(), np.empty(0), mode=config.mode)
    best = math.inf
    stall = 0
    for t in range(config.steps):
        reset_tape()
        c = Tensor(code, requires_grad=True)
        try:
            out = forward(c)
            loss = 1.0 - mef_ssim(sources, out)
            value = float(loss.data)
            backward(loss)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc} at iteration {t} for pair {pair.name!r}") from exc
        grad = c.grad
        if not math.isfinite(value) or grad is None or not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite loss or gradient at iteration {t} for pair {pair.name!r}")
        alpha = step_size(t, config)
        result.trace.append({"iteration": t, "loss": value, "alpha": alpha, "code": code.astype(np.float64)})
        result.iterations_used = t + 1
        if value < best:
            prev = best
            best = value
            result.best_code = code.copy()
            result.best_image = tensor_to_image(out.data)
            rel = (prev - value) / max(abs(prev), 1e-12) if math.isfinite(prev) else math.inf
        else:
            rel = 0.0
        stall = stall + 1 if rel < config.tol else 0
        if stall >= config.patience:
            break
        code = (code - alpha * grad).astype(gen.dtype)
    reset_tape()
    return result


def imitation_images(pair: ExposurePair, gen: Generator, soft: Optional[bool] = None) -> List[np.ndarray]:
    """``G(pair, code_i)`` for every ensemble member, using the codes matching how ``gen`` was trained."""
    n = gen.config.n_styles
    soft = gen.soft_labels if soft is None else soft
    return [gen.fuse(pair.over, pair.under, target_code(i, n, soft)) for i in range(n)]


def pick_best(pair: ExposurePair, candidates: Sequence[np.ndarray]) -> int:
    """Index of the candidate with the highest MEF-SSIM (first on ties)."""
    scores = [mef_ssim(pair.sources(), img) for img in candidates]
    return int(np.argmax(scores))


def ablation_pick(pair: ExposurePair, gen: Generator, mode: str, targets: Optional[Sequence[np.ndarray]] = None,
                  config: TunerConfig = TunerConfig(), soft: Optional[bool] = None) -> np.ndarray:
    """Ablation baselines: best raw target, best imitation, or latent-space search."""
    if mode == "pick_gt":
        candidates = list(targets) if targets is not None else run_all_targets(pair)
        return candidates[pick_best(pair, candidates)]
    _check_pair(pair, gen)
    if mode == "pick_imitation":
        candidates = imitation_images(pair, gen, soft)
        return candidates[pick_best(pair, candidates)]
    if mode == "latent_code":
        return tune(pair, gen, TunerConfig(**{**config.__dict__, "mode": "latent_code"})).best_image
    raise ValueError(f"ablation mode must be pick_gt, pick_imitation or latent_code, got {mode!r}")


def fuse(pair: ExposurePair, gen: Generator, config: TunerConfig = TunerConfig(),
         soft: Optional[bool] = None) -> np.ndarray:
    """End-to-end fusion of one pair under ``config.mode``."""
    if config.mode in ("style_code", "latent_code"):
        return tune(pair, gen, config).best_image
    return ablation_pick(pair, gen, config.mode, config=config, soft=soft)


def write_trace(result: TuneResult, path: PathLike) -> None:
    atomic_write_bytes(path, result.trace_csv().encode("utf-8"))

"""Stage one: build (pair, all-target outputs) samples and pre-train the imitator."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Adam, NonFiniteError, Tensor, backward, bce_with_logits, no_grad, reset_tape
from .fusers import FuserId, registry, run_target
from .imaging import ExposurePair, PathLike, atomic_write_bytes
from .imitator import Discriminator, Generator, NetConfig, image_to_tensor, save_generator, set_requires_grad
from .metrics import ssim

logger = logging.getLogger(__name__)

# Named random sub-streams derived from one seed.
STREAM_DATA, STREAM_TRAIN, STREAM_LABELS, STREAM_INIT = 0, 1, 2, 3


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass
class TrainingSample:
    pair: ExposurePair
    targets: List[np.ndarray]

    @property
    def n(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class SoftLabel:
    values: np.ndarray
    hot_index: int


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 0.002
    lr: float = 2e-4
    epochs: int = 40
    decay_start: Optional[int] = None
    seed: int = 0
    soft_labels: bool = True
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 1 and lr > 0")
        if not 0 < self.decay_at <= self.epochs:
            raise ValueError(f"decay_start must lie in (0, epochs], got {self.decay_at}")

    @property
    def decay_at(self) -> int:
        return max(1, self.epochs // 2) if self.decay_start is None else self.decay_start


def build_dataset(pairs: Sequence[ExposurePair], fusers: Optional[Sequence[FuserId]] = None) -> List[TrainingSample]:
    """One sample per pair holding every ensemble member's output, in registry order."""
    if not pairs:
        raise ValueError("build_dataset needs at least one pair")
    fusers = list(fusers) if fusers is not None else registry()
    samples = []
    for k, pair in enumerate(pairs):
        outs = []
        for f in fusers:
            try:
                outs.append(run_target(f, pair))
            except Exception as exc:
                raise RuntimeError(f"fuser {f.name!r} failed on pair {k} ({pair.name!r}): {exc}") from exc
        samples.append(TrainingSample(pair, outs))
    return samples


def sample_soft_label(hot_index: int, n: int, rng: np.random.Generator) -> SoftLabel:
    """Hot component uniform in (0.5, 1.0], the others uniform in [0.0, 0.5)."""
    if not 0 <= hot_index < n:
        raise IndexError(f"hot_index {hot_index} out of range for n={n}")
    u = rng.random(n)
    values = 0.5 * u
    values[hot_index] = 1.0 - 0.5 * u[hot_index]
    return SoftLabel(values, hot_index)


def hard_label(hot_index: int, n: int) -> SoftLabel:
    if not 0 <= hot_index < n:
        raise IndexError(f"hot_index {hot_index} out of range for n={n}")
    return SoftLabel(np.eye(n)[hot_index], hot_index)


def target_code(index: int, n: int, soft: bool = True) -> np.ndarray:
    """Deterministic code that selects ensemble member ``index``.

    For soft-label models this is the centre of the training distribution
    (0.75 hot, 0.25 cold); for hard-label models the one-hot vector.
    """
    if not 0 <= index < n:
        raise IndexError(f"index {index} out of range for n={n}")
    if not soft:
        return np.eye(n)[index]
    code = np.full(n, 0.25)
    code[index] = 0.75
    return code


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """One of the eight flips/rotations of an ``(..., H, W)`` array: ``k % 4`` quarter turns, mirrored if ``k >= 4``."""
    out = np.rot90(img, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def lr_at(epoch: int, config: TrainingConfig) -> float:
    """Constant until ``decay_start``, then linear towards zero at ``epochs``."""
    if epoch < config.decay_at:
        return config.lr
    span = config.epochs - config.decay_at
    if span <= 0:
        return config.lr
    return config.lr * (config.epochs - epoch) / span


def g_loss(fake: Tensor, target, d_fake_logits: Tensor, lam: float):
    """``(1 - SSIM(fake, target)) + lam * BCE(D(fake) -> real)``; returns (total, ssim_term, adv_term)."""
    ssim_term = 1.0 - ssim(fake, target, channels="rgb")
    adv_term = bce_with_logits(d_fake_logits, 1.0)
    return ssim_term + adv_term * lam, ssim_term, adv_term


def d_loss(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tensor:
    return bce_with_logits(d_real_logits, 1.0) + bce_with_logits(d_fake_logits, 0.0)


def _check(value: Tensor, what: str, epoch: int, step: int, sample: int) -> float:
    v = float(value.data)
    if not math.isfinite(v):
        raise NonFiniteError(f"non-finite {what} ({v}) at epoch {epoch}, step {step}, sample {sample}")
    return v


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    history: List[Dict[str, float]] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "ssim_loss", "adv_loss", "d_loss", "lr"])
        for row in self.history:
            writer.writerow([row["epoch"], f"{row['ssim_loss']:.8f}", f"{row['adv_loss']:.8f}",
                             f"{row['d_loss']:.8f}", f"{row['lr']:.8g}"])
        return buf.getvalue()


def pretrain(dataset: Sequence[TrainingSample], net_config: NetConfig = NetConfig(),
             config: TrainingConfig = TrainingConfig(), checkpoint_dir: Optional[PathLike] = None,
             progress: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainResult:
    """Alternate one discriminator and one generator Adam step per (sample, target) visit.

    Each epoch visits every sample once in a seeded random order; the target
    index cycles with the epoch so every style is seen equally often. Soft
    labels are redrawn at every visit, and with ``augment`` each visit uses a
    random flip/rotation of the pair and its target.
    """
    if not dataset:
        raise ValueError("pretrain needs a non-empty dataset")
    n = dataset[0].n
    if n != net_config.n_styles:
        raise ValueError(f"dataset has {n} targets per sample, network expects {net_config.n_styles}")
    init = substream(config.seed, STREAM_INIT)
    gen = Generator(net_config, seed=int(init.integers(2 ** 31)))
    gen.soft_labels = config.soft_labels
    disc = Discriminator(seed=int(init.integers(2 ** 31)))
    opt_g = Adam(gen.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    opt_d = Adam(disc.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    order_rng = substream(config.seed, STREAM_TRAIN)
    label_rng = substream(config.seed, STREAM_LABELS)
    result = TrainResult(gen, disc)
    plain = [[image_to_tensor(img).data for img in (s.pair.over, s.pair.under, *s.targets)] for s in dataset]
    views: Dict[tuple, List[Tensor]] = {}

    def view(k: int, t: int) -> List[Tensor]:
        # stored targets are transformed alongside the pair rather than recomputed
        if (k, t) not in views:
            views[(k, t)] = [Tensor(dihedral(a, t)) for a in plain[k]]
        return views[(k, t)]

    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        t0 = time.perf_counter()
        sums = np.zeros(3)
        for k in order_rng.permutation(len(dataset)):
            t = int(order_rng.integers(8)) if config.augment else 0
            over, under, *targets = view(int(k), t)
            idx = int((k + epoch) % n)
            label = (sample_soft_label(idx, n, label_rng) if config.soft_labels else hard_label(idx, n)).values
            code = label.astype(np.float32)
            real = targets[idx]

            try:
                # discriminator step on a detached fake
                reset_tape()
                set_requires_grad([gen], False)
                with no_grad():
                    fake_const = gen(over, under, code)
                set_requires_grad([disc], True)
                ld = d_loss(disc(real, over, under), disc(Tensor(fake_const.data), over, under))
                sums[2] += _check(ld, "discriminator loss", epoch, step, k)
                opt_d.zero_grad()
                backward(ld)
                opt_d.step(lr)

                # generator step
                set_requires_grad([gen], True)
                set_requires_grad([disc], False)
                fake = gen(over, under, code)
                total, ls, la = g_loss(fake, real, disc(fake, over, under), config.lam)
                sums[0] += _check(ls, "SSIM loss", epoch, step, k)
                sums[1] += _check(la, "adversarial loss", epoch, step, k)
                _check(total, "generator loss", epoch, step, k)
                opt_g.zero_grad()
                backward(total)
                opt_g.step(lr)
            except NonFiniteError as exc:
                if "at epoch" in str(exc):
                    raise
                raise NonFiniteError(f"{exc} at epoch {epoch}, step {step}, sample {k}") from exc
            step += 1

        set_requires_grad([gen, disc], True)
        mean = sums / len(dataset)
        row = {"epoch": epoch + 1, "ssim_loss": float(mean[0]), "adv_loss": float(mean[1]),
               "d_loss": float(mean[2]), "lr": lr, "seconds": time.perf_counter() - t0}
        result.history.append(row)
        logger.info("epoch %d/%d ssim_loss=%.4f adv=%.4f d=%.4f lr=%.2e (%.1fs)", epoch + 1, config.epochs,
                    row["ssim_loss"], row["adv_loss"], row["d_loss"], lr, row["seconds"])
        if progress is not None:
            progress(row)
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_generator(gen, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.emef")
    reset_tape()
    return result


def write_history(result: TrainResult, path: PathLike) -> None:
    atomic_write_bytes(path, result.history_csv().encode("utf-8"))


def imitation_scores(gen: Generator, samples: Sequence[TrainingSample], soft: Optional[bool] = None) -> np.ndarray:
    """``scores[p, i] = ssim(G(pair_p, code_i), M_i(pair_p))`` on luminance."""
    n = gen.config.n_styles
    soft = gen.soft_labels if soft is None else soft
    out = np.zeros((len(samples), n))
    for p, s in enumerate(samples):
        for i in range(n):
            out[p, i] = ssim(gen.fuse(s.pair.over, s.pair.under, target_code(i, n, soft)), s.targets[i])
    return out

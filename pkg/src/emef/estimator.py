"""scikit-learn style wrapper: ``fit`` pre-trains the imitator, ``transform`` fuses pairs."""
from __future__ import annotations

from typing import List, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .imaging import ExposurePair
from .imitator import Generator, NetConfig
from .training import TrainingConfig, build_dataset, pretrain
from .tuner import TunerConfig, fuse

PairsLike = Union[np.ndarray, Sequence[ExposurePair], Sequence[Sequence[np.ndarray]]]


def check_pairs(X: PairsLike) -> List[ExposurePair]:
    """Accept ExposurePairs, ``(over, under)`` tuples, or an ``(N, 2, H, W, 3)`` array."""
    if isinstance(X, ExposurePair):
        raise TypeError("expected a sequence of pairs, got a single ExposurePair")
    if isinstance(X, np.ndarray):
        if X.ndim != 5 or X.shape[1] != 2:
            raise ValueError(f"array input must be (N, 2, H, W, C), got {X.shape}")
        X = [(x[0], x[1]) for x in X]
    pairs = []
    for k, item in enumerate(X):
        if isinstance(item, ExposurePair):
            pairs.append(item)
        else:
            try:
                over, under = item
            except (TypeError, ValueError):
                raise TypeError(f"item {k} is not an (over, under) pair") from None
            over, under = (np.asarray(a, dtype=np.float64) for a in (over, under))
            pairs.append(ExposurePair(over, under, f"pair{k:05d}"))
    if not pairs:
        raise ValueError("no pairs given")
    return pairs


class EMEFFusion(TransformerMixin, BaseEstimator):
    """Ensemble-imitating exposure fusion.

    ``fit`` builds the target dataset from the registered classical fusers and
    pre-trains the style-controlled generator; ``transform`` searches the style
    code per pair and returns the fused images as an ``(N, H, W, 3)`` array.
    """

    def __init__(self, size=64, base=32, depth=4, d_latent=64, epochs=40, lam=0.002, lr=2e-4,
                 soft_labels=True, seed=0, alpha0=0.05, steps=60, mode="style_code"):
        self.size = size
        self.base = base
        self.depth = depth
        self.d_latent = d_latent
        self.epochs = epochs
        self.lam = lam
        self.lr = lr
        self.soft_labels = soft_labels
        self.seed = seed
        self.alpha0 = alpha0
        self.steps = steps
        self.mode = mode

    def _tuner_config(self) -> TunerConfig:
        return TunerConfig(alpha0=self.alpha0, steps=self.steps, mode=self.mode)

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        self._tuner_config()  # validate early
        net = NetConfig(size=self.size, base=self.base, depth=self.depth, d_latent=self.d_latent)
        train = TrainingConfig(lam=self.lam, lr=self.lr, epochs=self.epochs, seed=self.seed,
                               soft_labels=self.soft_labels)
        result = pretrain(build_dataset(pairs), net, train)
        self.generator_ = result.generator
        self.history_ = result.history
        return self

    def set_generator(self, gen: Generator) -> "EMEFFusion":
        """Use an already trained generator instead of calling ``fit``."""
        self.generator_ = gen
        self.history_ = []
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "generator_"):
            raise NotFittedError("EMEFFusion is not fitted; call fit or set_generator first")
        pairs = check_pairs(X)
        config = self._tuner_config()
        return np.stack([fuse(p, self.generator_, config) for p in pairs])

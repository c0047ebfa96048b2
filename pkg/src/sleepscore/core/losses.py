"""Classification losses.

Focal loss follows FL = -(1 - p_t)^gamma * log(p_t), optionally scaled by a
per-class weight; gamma = 0 with unit weights reduces it to cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import DomainError
from .tensor import Tensor, clamp, log, tmean

_P_EPS = 1e-7


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    class_weights: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise DomainError(f"focal loss gamma must be >= 0, got {self.gamma}")


def focal_loss(probs: Tensor, target, cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Mean focal loss of predicted probabilities against integer targets.

    `probs` is a [C] distribution or a [B, C] batch; `target` a class index
    or a length-B array. p_t is clamped to [1e-7, 1 - 1e-7] before the log.
    """
    single = probs.ndim == 1
    if single:
        probs = probs.reshape(1, -1)
    n, n_classes = probs.shape
    targets = np.atleast_1d(np.asarray(target))
    if targets.shape != (n,):
        raise DomainError(f"expected {n} targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= n_classes or \
            not np.issubdtype(targets.dtype, np.integer):
        raise DomainError(f"targets must be integers in [0, {n_classes - 1}], "
                          f"got {targets.tolist()}")

    p_t = clamp(probs[np.arange(n), targets], _P_EPS, 1.0 - _P_EPS)
    loss = -((1.0 - p_t) ** cfg.gamma) * log(p_t)
    if cfg.class_weights is not None:
        weights = np.asarray(cfg.class_weights, dtype=probs.data.dtype)
        if weights.shape != (n_classes,):
            raise DomainError(f"class_weights must have length {n_classes}")
        loss = loss * Tensor(weights[targets])
    return tmean(loss)


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Mean negative log-likelihood; equals focal loss at gamma = 0."""
    return focal_loss(probs, target, FocalLossConfig(gamma=0.0))

"""Forecast objectives and memory regularizers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    c1: float = 0.5
    c2: float = 0.2
    c3: float = 0.3
    margin: float = 1.0  # lambda

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.margin) < 0:
            raise ValueError("loss weights and margin must be nonnegative")


def _check(y_hat, y, op):
    if tuple(np.shape(y_hat.data if isinstance(y_hat, Tensor) else y_hat)) != tuple(np.shape(y)):
        raise ShapeError(op, np.shape(getattr(y_hat, "data", y_hat)), np.shape(y))


def mae(y_hat, y) -> Tensor:
    """Mean absolute error over every predicted entry."""
    _check(y_hat, y, "mae")
    return ad.mean(ad.absolute(ad.sub(y_hat, y)))


def rmse(y_hat, y) -> float:
    _check(y_hat, y, "rmse")
    diff = np.asarray(getattr(y_hat, "data", y_hat)) - np.asarray(getattr(y, "data", y))
    return float(np.sqrt(np.mean(diff * diff)))


def _anchor_distances(O: Tensor, M: Tensor, top2: np.ndarray) -> tuple[Tensor, Tensor]:
    """Distances from every anchor row of ``O`` (..., N, d) to its positive and negative item."""
    d_pos = ad.norm(O - ad.take(M, top2[..., 0], axis=0), axis=-1, keepdims=False)
    d_neg = ad.norm(O - ad.take(M, top2[..., 1], axis=0), axis=-1, keepdims=False)
    return d_pos, d_neg


def _per_sample(total: Tensor, O: Tensor) -> Tensor:
    """Sum over nodes, mean over the leading sample axis (if any)."""
    n_samples = int(np.prod(O.shape[:-2])) if O.ndim > 2 else 1
    return total / float(n_samples)


def separate_loss(O, M, top2: np.ndarray, margin: float = 1.0) -> Tensor:
    """Triplet hinge pulling each anchor toward its best item and away from the runner-up."""
    O, M = ad.as_tensor(O), ad.as_tensor(M)
    if M.shape[0] < 2:
        raise ValueError("separate_loss needs at least 2 memory items")
    d_pos, d_neg = _anchor_distances(O, M, top2)
    return _per_sample(ad.sum(ad.relu(d_pos - d_neg + margin)), O)


def compact_loss(O, M, top2: np.ndarray) -> Tensor:
    """Distance of each anchor to its best-matching memory item."""
    O, M = ad.as_tensor(O), ad.as_tensor(M)
    d_pos = ad.norm(O - ad.take(M, top2[..., 0], axis=0), axis=-1, keepdims=False)
    return _per_sample(ad.sum(d_pos), O)


def total_loss(mae_term, sep_term, comp_term, weights: LossWeights):
    return weights.c1 * mae_term + weights.c2 * sep_term + weights.c3 * comp_term

"""
Scene Fusion - Loss functions.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence, Union

import numpy as np

from scene_fusion.autodiff import (
    Var,
    log_softmax_rows,
    mean_all,
    pick,
    scale,
)
from scene_fusion.errors import ContractError, DimensionError, NonFiniteError
from scene_fusion.scenegraph import LabelMap

PROBABILITY_TOLERANCE = 1e-6


class Reduction(Enum):
    SUM = "sum"
    MEAN = "mean"


def cross_entropy(logits: Var, labels: Union[int, Sequence[int]]) -> Var:
    """Mean of -log softmax(logits_i)[label_i] over the rows."""
    targets = [labels] if isinstance(labels, (int, np.integer)) else list(labels)
    if len(targets) != logits.rows:
        raise DimensionError("cross_entropy labels", logits.shape, (len(targets),))
    for label in targets:
        if not 0 <= label < logits.cols:
            raise ContractError(f"label {label} outside 0..{logits.cols - 1}")
    return scale(mean_all(pick(log_softmax_rows(logits), targets)), -1.0)


def pixelwise_cross_entropy(
    pred_probs: np.ndarray,
    gt: LabelMap,
    reduction: Union[Reduction, str] = Reduction.SUM,
) -> float:
    """-sum_{i,j} log p_{gt(i,j)}(i, j), optionally divided by H*W.

    `pred_probs` is H x W x C with every pixel's distribution summing to 1.
    """
    reduction = Reduction(reduction)
    probs = np.asarray(pred_probs, dtype=np.float64)
    expected = (gt.height, gt.width, gt.num_classes)
    if probs.shape != expected:
        raise DimensionError("pixelwise_cross_entropy", expected, probs.shape)
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=2) - 1.0) > PROBABILITY_TOLERANCE):
        raise ContractError("per-pixel probabilities must be non-negative and sum to 1")
    picked = np.take_along_axis(probs, gt.pixels[:, :, None].astype(np.intp), axis=2)[:, :, 0]
    if np.any(picked <= 0):
        raise NonFiniteError("zero probability assigned to a ground-truth pixel")
    total = float(-np.log(picked).sum())
    if reduction is Reduction.MEAN:
        return total / (gt.height * gt.width)
    return total


__all__ = ["Reduction", "cross_entropy", "pixelwise_cross_entropy"]

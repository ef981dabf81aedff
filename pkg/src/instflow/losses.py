"""Map-level training objective: semantic CE, center MSE, offset L1 and shape consistency.

Pure functions over whole maps; there is no optimizer or autograd here.
Weighted reductions normalize by the weight sum, so a zero weight map
yields 0 and background masking is expressed by zero weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OffsetField, ScalarMap, SemanticProbMap
from .errors import DimensionError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_cent: float = 100.0
    lambda_inter: float = 0.01
    lambda_intra: float = 0.01
    lambda_shape: float = 0.01

    def __post_init__(self):
        for name in ("lambda_cent", "lambda_inter", "lambda_intra", "lambda_shape"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class LossComponents:
    sem: float = 0.0
    cent: float = 0.0
    inter: float = 0.0
    intra: float = 0.0
    shape: float = 0.0


def pixel_weights(weights, shape) -> np.ndarray:
    """Validate a per-pixel weight map; ``None`` means uniform weights."""
    if weights is None:
        return np.ones(shape)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != tuple(shape):
        raise DimensionError(f"weight map {w.shape} does not match {tuple(shape)}")
    if not np.isfinite(w).all() or (w < 0).any():
        raise ValueError("pixel weights must be finite and non-negative")
    return w


def _weighted_mean(per_pixel: np.ndarray, w: np.ndarray) -> float:
    total = w.sum()
    if total == 0:
        return 0.0
    return float((per_pixel * w).sum() / total)


def _same(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def semantic_loss(pred: SemanticProbMap, gt_labels) -> float:
    """Mean cross entropy of the ground-truth class, probabilities floored at 1e-12."""
    labels = np.asarray(gt_labels)
    _same(pred, labels)
    if labels.size and (labels.min() < 0 or labels.max() >= pred.num_classes):
        raise ValueError(f"ground-truth classes must lie in [0, {pred.num_classes})")
    rows, cols = np.indices(labels.shape)
    p = pred.probs[labels, rows, cols]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def center_loss(pred: ScalarMap, gt: ScalarMap, weights=None) -> float:
    _same(pred, gt)
    w = pixel_weights(weights, pred.shape)
    diff = pred.values - gt.values
    return _weighted_mean(diff * diff, w)


def offset_loss(pred: OffsetField, gt: OffsetField, weights=None) -> float:
    _same(pred, gt)
    w = pixel_weights(weights, pred.shape)
    l1 = np.abs(pred.d_row - gt.d_row) + np.abs(pred.d_col - gt.d_col)
    return _weighted_mean(l1, w)


def shape_loss(
    pred_intra: OffsetField,
    pred_inter: OffsetField,
    gt_intra: OffsetField,
    gt_inter: OffsetField,
    weights=None,
) -> float:
    """Squared distance between ground-truth and predicted offset residuals.

    Only the residual ``inter - intra`` is penalized, so errors shared by both
    predicted offsets cancel.
    """
    for other in (pred_inter, gt_intra, gt_inter):
        _same(pred_intra, other)
    w = pixel_weights(weights, pred_intra.shape)
    gap_r = (gt_inter.d_row - gt_intra.d_row) - (pred_inter.d_row - pred_intra.d_row)
    gap_c = (gt_inter.d_col - gt_intra.d_col) - (pred_inter.d_col - pred_intra.d_col)
    return _weighted_mean(gap_r * gap_r + gap_c * gap_c, w)


def total_loss(components: LossComponents, weights: LossWeights = LossWeights()) -> float:
    values = (components.sem, components.cent, components.inter, components.intra, components.shape)
    if not all(np.isfinite(values)):
        raise ValueError("loss components must be finite")
    return (
        components.sem
        + weights.lambda_cent * components.cent
        + weights.lambda_inter * components.inter
        + weights.lambda_intra * components.intra
        + weights.lambda_shape * components.shape
    )

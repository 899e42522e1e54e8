"""Segmentation quality metrics."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .exceptions import DimensionError, UndefinedMetricError

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _same_shape(a, b, what):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def pixel_accuracy(pred, y) -> float:
    pred, y = _same_shape(pred, y, "pixel_accuracy")
    return float(np.count_nonzero(pred.astype(bool) == y.astype(bool))) / pred.size


def soft_dice_coefficient(prob, y, smooth: float = 1.0) -> float:
    """``(2*sum(p*y) + s) / (sum(p) + sum(y) + s)``; 1 means perfect overlap."""
    prob, y = _same_shape(prob, y, "soft_dice_coefficient")
    p = prob.astype(np.float64)
    t = y.astype(np.float64)
    return float((2.0 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth))


def label_components(mask) -> np.ndarray:
    """Label 4-connected foreground regions of a 2-D binary mask (background 0)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"label_components expects a 2-D mask, got {mask.shape}")
    labels, _ = ndimage.label(mask.astype(bool), structure=_FOUR_CONNECTED)
    return labels


def _pairs(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def rand_index_foreground(pred_labels, true_labels) -> float:
    """Rand index restricted to pixel pairs that are foreground in the truth.

    A pair agrees when both segmentations put its pixels in the same segment,
    or both put them in different segments. Prediction ids are compared
    literally, so a predicted background id 0 counts as one segment.
    """
    pred, truth = _same_shape(pred_labels, true_labels, "rand_index_foreground")
    fg = truth != 0
    n = int(np.count_nonzero(fg))
    if n < 2:
        raise UndefinedMetricError("rand index needs at least two foreground pixels in the truth")
    p = pred[fg].ravel()
    t = truth[fg].ravel()
    _, p_idx = np.unique(p, return_inverse=True)
    _, t_idx = np.unique(t, return_inverse=True)
    joint = np.bincount(p_idx * (t_idx.max() + 1) + t_idx)
    same_both = _pairs(joint)
    same_pred = _pairs(np.bincount(p_idx))
    same_true = _pairs(np.bincount(t_idx))
    total = n * (n - 1) // 2
    agree = total + 2 * same_both - same_pred - same_true
    return agree / total


def segment_rand_index(prob, y, threshold: float = 0.5) -> float:
    """Rand index of the 4-connected regions of thresholded ``prob`` vs ``y``."""
    prob, y = _same_shape(prob, y, "segment_rand_index")
    return rand_index_foreground(label_components(prob > threshold), label_components(y > 0.5))

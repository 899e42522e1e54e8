"""Segmentation losses on pre-sigmoid logits."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, make_result
from .exceptions import DimensionError, LabelError
from .ops import sigmoid_array


def _labels(logits: Tensor, y, check_binary: bool = True) -> np.ndarray:
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    if yd.shape != logits.shape:
        raise DimensionError(f"labels shape {yd.shape} != logits shape {logits.shape}")
    if check_binary and not np.all((yd == 0) | (yd == 1)):
        raise LabelError("labels must be 0 or 1")
    return yd.astype(logits.dtype, copy=False)


def bce_loss(logits, y) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and binary ``y``.

    Uses ``max(z, 0) - z*y + log(1 + exp(-|z|))`` so large logits never
    overflow.
    """
    logits = as_tensor(logits)
    yd = _labels(logits, y)
    z = logits.data
    n = z.size
    per = np.maximum(z, 0) - z * yd + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)

    def backward(g):
        return ((sigmoid_array(z) - yd) * (g / n),)

    return make_result(out, (logits,), backward, "bce")


def dice_loss(logits, y, smooth: float = 1.0) -> Tensor:
    """Negative soft Dice overlap: ``-(2*sum(o*y) + s) / (sum(o) + sum(y) + s)``."""
    logits = as_tensor(logits)
    yd = _labels(logits, y)
    o = sigmoid_array(logits.data)
    inter = float((o * yd).sum())
    denom = float(o.sum() + yd.sum()) + smooth
    numer = 2.0 * inter + smooth
    out = np.asarray(-numer / denom, dtype=logits.dtype)

    def backward(g):
        d_o = -(2.0 * yd * denom - numer) / (denom * denom)
        return (g * d_o * o * (1 - o),)

    return make_result(out, (logits,), backward, "dice")


LOSSES = {"bce": bce_loss, "dice": dice_loss}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None

"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .exceptions import DimensionError, LabelError


def check_images(X, name: str = "X", expected_hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Return ``X`` as a float array of shape (N, 1, H, W).

    Accepts (N, H, W) grayscale stacks or (N, 1, H, W). Non-finite values
    are rejected.
    """
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise DimensionError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise DimensionError(f"{name} must have shape (N, H, W) or (N, 1, H, W), got {np.shape(X)}")
    if arr.shape[0] == 0:
        raise DimensionError(f"{name} is empty")
    if expected_hw is not None and tuple(arr.shape[2:]) != tuple(expected_hw):
        raise DimensionError(f"{name} has spatial size {arr.shape[2:]}, expected {tuple(expected_hw)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr.astype(np.float32, copy=False)


def check_masks(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    """Binary masks shaped like ``X`` (already validated), as float32."""
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != X.shape:
        raise DimensionError(f"{name} shape {np.shape(y)} does not match images {X.shape}")
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise LabelError(f"{name} must be binary (0/1), found values {values[:5]}")
    return arr.astype(np.float32)


def check_divisible(hw: Tuple[int, int], factor: int) -> None:
    """Spatial size must survive ``factor``-fold decimation."""
    for side in hw:
        if side % factor:
            raise DimensionError(f"spatial size {tuple(hw)} is not divisible by {factor}")


def check_probability(value: float, name: str, upper_open: bool = True) -> float:
    value = float(value)
    ok = 0.0 <= value < 1.0 if upper_open else 0.0 <= value <= 1.0
    if not ok:
        raise ValueError(f"{name} must lie in [0, 1{')' if upper_open else ']'}, got {value}")
    return value

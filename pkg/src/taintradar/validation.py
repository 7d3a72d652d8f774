"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_images(x, input_shape=None, name: str = "images", batched: bool = None) -> np.ndarray:
    """Validate CHW / NCHW image arrays: finite float values in [0, 1].

    Returns a float32 array. ``batched=None`` accepts either layout and
    returns it unchanged; True/False force one layout.
    """
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3 and batched is not True:
        chw = arr.shape
    elif arr.ndim == 4 and batched is not False:
        chw = arr.shape[1:]
    else:
        want = "(N, C, H, W)" if batched else "(C, H, W)"
        raise ValueError(f"{name}: expected {want}, got shape {arr.shape}")
    if input_shape is not None and tuple(chw) != tuple(input_shape):
        raise ValueError(f"{name}: shape {tuple(chw)} does not match model input {tuple(input_shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise ValueError(f"{name}: values outside [0, 1] (min {arr.min():.4g}, max {arr.max():.4g})")
    return arr


def check_labels(y, num_classes: int, n: int = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"labels: {arr.shape[0]} entries for {n} images")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): min {arr.min()}, max {arr.max()}")
    return arr


def check_mask(mask, shape=None, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != np.bool_:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name}: values must be 0/1 to form a binary mask")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name}: shape {arr.shape} does not match expected {tuple(shape)}")
    return arr

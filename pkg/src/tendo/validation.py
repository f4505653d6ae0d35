"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X") -> np.ndarray:
    """``(n, h, w)`` 8-bit images; float input must hold integral values in [0, 255]."""
    X = np.asarray(X)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n, h, w), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.number) or not np.all(np.isfinite(X)):
        raise ValueError(f"{name} must be finite numbers")
    if X.min() < 0 or X.max() > 255 or np.any(X != np.round(X)):
        raise ValueError(f"{name} must hold integer intensities in [0, 255]")
    return X.astype(np.uint8)


def check_masks(y, shape=None, name: str = "y") -> np.ndarray:
    """``(n, h, w)`` binary masks as uint8 0/1."""
    y = np.asarray(y)
    if y.ndim == 4 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 3:
        raise ValueError(f"{name} must have shape (n, h, w), got {y.shape}")
    if shape is not None and y.shape != tuple(shape):
        raise ValueError(f"{name} has shape {y.shape}, expected {tuple(shape)}")
    if not np.all((y == 0) | (y == 1) | (y == 255)):
        raise ValueError(f"{name} must be binary (0/1 or 0/255)")
    return (y != 0).astype(np.uint8)


def check_image_mask_stack(X, name: str = "X"):
    """Split an ``(n, 2, h, w)`` stack into images and masks."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2, h, w) holding image and mask, got {X.shape}")
    images = check_images(X[:, 0], f"{name}[:, 0]")
    masks = check_masks(X[:, 1], images.shape, f"{name}[:, 1]")
    empty = [i for i, m in enumerate(masks) if not m.any()]
    if empty:
        raise ValueError(f"{name}: masks of samples {empty[:5]} are empty")
    return images, masks


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} labels for {n} samples")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(int)

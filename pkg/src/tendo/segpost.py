"""Thresholding and largest-object filtering of predicted tendon maps."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.4
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class EmptyMaskWarning(UserWarning):
    """Post-processing produced an empty mask."""


def binarize(pred, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def label_components(mask) -> tuple:
    """8-connected labelling: ``(labels, count)``."""
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def largest_component(mask, warn: bool = True) -> np.ndarray:
    """Keep the largest 8-connected component.

    Equal sizes are resolved in favour of the component holding the smallest
    row-major pixel index.
    """
    mask = np.asarray(mask)
    labels, count = label_components(mask)
    if count == 0:
        if warn:
            warnings.warn("post-processing produced an empty mask", EmptyMaskWarning, stacklevel=2)
        return np.zeros(mask.shape, dtype=np.uint8)
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    first = np.full(count, flat.size, dtype=np.int64)
    idx = np.flatnonzero(flat)
    np.minimum.at(first, flat[idx] - 1, idx)
    best = min(range(count), key=lambda i: (-sizes[i], first[i]))
    return (labels == best + 1).astype(np.uint8)


def segment_postprocess(pred, threshold: float = DEFAULT_THRESHOLD, warn: bool = True) -> np.ndarray:
    return largest_component(binarize(pred, threshold), warn=warn)

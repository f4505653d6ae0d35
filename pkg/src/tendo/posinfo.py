"""Polar positional-information maps of a tendon mask.

Coordinates are raster coordinates: ``x`` is the column index (rightward) and
``y`` the row index (downward). Every quantity is computed from integer
offsets to the mask's bounding-box corner, so translating the mask translates
the maps bit-for-bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

SENTINEL = -1.0
_TIE = 1e-12


class EmptySegmentationError(ValueError):
    """The mask has no foreground pixel."""


@dataclass
class PositionMaps:
    radius: np.ndarray
    angle: np.ndarray
    origin: Tuple[float, float]
    orientation: float

    def stack(self) -> np.ndarray:
        return np.stack([self.radius, self.angle])


def _offsets(mask: np.ndarray):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptySegmentationError("empty segmentation")
    x0, y0 = int(xs.min()), int(ys.min())
    return xs, ys, x0, y0


def _centred(mask):
    xs, ys, x0, y0 = _offsets(mask)
    dx = (xs - x0).astype(np.float64)
    dy = (ys - y0).astype(np.float64)
    ox, oy = dx.mean(), dy.mean()
    return xs, ys, dx - ox, dy - oy, (x0 + ox, y0 + oy)


def compute_centroid(mask) -> Tuple[float, float]:
    """Mean ``(x, y)`` over the foreground pixels."""
    return _centred(mask)[4]


def _orientation(cx: np.ndarray, cy: np.ndarray) -> float:
    mu20 = np.mean(cx * cx)
    mu02 = np.mean(cy * cy)
    mu11 = np.mean(cx * cy)
    a, b = 2.0 * mu11, mu20 - mu02
    if abs(a) < _TIE and abs(b) < _TIE:
        return 0.0
    alpha = 0.5 * math.atan2(a, b)
    if alpha <= -math.pi / 2:
        alpha += math.pi
    return alpha


def compute_orientation(mask) -> float:
    """Angle in (-pi/2, pi/2] of the major axis of the equal-second-moment ellipse."""
    _, _, cx, cy, _ = _centred(mask)
    return _orientation(cx, cy)


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    """Wrap into (-pi, pi]."""
    return math.pi - np.mod(math.pi - theta, 2 * math.pi)


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def build_position_maps(mask) -> PositionMaps:
    """Normalised radius and angle maps, ``-1`` outside the mask."""
    mask = np.asarray(mask)
    xs, ys, cx, cy, origin = _centred(mask)
    alpha = _orientation(cx, cy)
    r = np.sqrt(cx * cx + cy * cy)
    theta = wrap_angle(np.arctan2(cy, cx) - alpha)
    radius = np.full(mask.shape, SENTINEL)
    angle = np.full(mask.shape, SENTINEL)
    radius[ys, xs] = _minmax(r)
    angle[ys, xs] = _minmax(theta)
    return PositionMaps(radius, angle, origin, alpha)


def to_preview(values: np.ndarray) -> np.ndarray:
    """8-bit rendering of a map: [0, 1] mapped linearly to [0, 255], sentinel to 0."""
    v = np.where(values < 0, 0.0, values)
    return np.round(v * 255).astype(np.uint8)

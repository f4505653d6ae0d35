"""On-the-fly augmentation for the segmentation and recognition tasks.

Geometric transforms are composed into one affine map and applied to the
image (bilinear) and the mask (nearest neighbour) together; photometric
transforms touch the image only. Out-of-frame samples are filled by
reflection. Each transform fires independently with ``probability``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

SEGMENTATION_TRANSFORMS = (
    "intensity_scale", "contrast", "illumination", "hflip", "vflip", "rotation", "zoom",
    "translation", "shear", "elastic", "sharpness", "noise",
)
CLASSIFICATION_TRANSFORMS = ("vflip", "rotation", "zoom", "translation", "shear", "noise")


@dataclass(frozen=True)
class AugmentPolicy:
    task: str = "segmentation"
    transforms: Tuple[str, ...] = SEGMENTATION_TRANSFORMS
    probability: float = 0.5
    intensity_scale: Tuple[float, float] = (0.7, 1.3)
    contrast_levels: float = 20.0
    illumination_slope: float = 0.2
    rotation_deg: float = 20.0
    zoom: Tuple[float, float] = (0.8, 1.2)
    translation: float = 0.1
    shear: float = 0.15
    elastic_sigma: float = 8.0
    elastic_amplitude: float = 6.0
    blur_sigma: Tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 5.0

    @classmethod
    def for_task(cls, task: str, **kw) -> "AugmentPolicy":
        defaults = {"segmentation": SEGMENTATION_TRANSFORMS, "classification": CLASSIFICATION_TRANSFORMS}
        if task in defaults:
            kw.setdefault("transforms", defaults[task])
            return cls(task=task, **kw)
        raise ValueError(f"unknown augmentation task {task!r}")


def sample_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    """Per-sample stream; independent of worker scheduling."""
    return np.random.default_rng([seed, index, epoch])


def _restore(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    out = np.clip(out, 0, 255)
    if like.dtype == np.uint8:
        return np.round(out).astype(np.uint8)
    return out.astype(like.dtype, copy=False)


def affine_matrix(shape, angle_deg=0.0, zoom=1.0, shift=(0.0, 0.0), shear=(0.0, 0.0),
                  hflip=False, vflip=False) -> Tuple[np.ndarray, np.ndarray]:
    """Output-to-input ``(matrix, offset)`` in (row, col) coordinates about the image centre."""
    h, w = shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    sh = np.array([[1.0, shear[0]], [shear[1], 1.0]])
    flip = np.diag([-1.0 if vflip else 1.0, -1.0 if hflip else 1.0])
    fwd = flip @ rot @ sh * zoom
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + np.asarray(shift, dtype=np.float64))
    return inv, offset


def warp(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int) -> np.ndarray:
    return ndimage.affine_transform(image.astype(np.float64), matrix, offset=offset, order=order,
                                    mode="reflect")


def _is_identity(matrix, offset) -> bool:
    return np.array_equal(matrix, np.eye(2)) and not np.any(offset)


def apply_augment(image: np.ndarray, mask: Optional[np.ndarray], policy: AugmentPolicy,
                  rng: np.random.Generator, force: Optional[dict] = None):
    """Return ``(image', mask')``; ``mask'`` is ``None`` when no mask is given.

    ``force`` maps transform names to explicit parameters (used by previews and tests);
    a forced transform always fires and skips its random draw.
    """
    image = np.asarray(image)
    h, w = image.shape
    force = force or {}
    on = {t: (t in force) or (rng.random() < policy.probability) for t in policy.transforms}
    draw = lambda name, fn: force[name] if name in force else fn()  # noqa: E731

    angle = draw("rotation", lambda: rng.uniform(-policy.rotation_deg, policy.rotation_deg)) if on.get("rotation") else 0.0
    zoom = draw("zoom", lambda: rng.uniform(*policy.zoom)) if on.get("zoom") else 1.0
    shift = draw("translation", lambda: (rng.uniform(-1, 1) * policy.translation * h,
                                         rng.uniform(-1, 1) * policy.translation * w)) if on.get("translation") else (0.0, 0.0)
    shear = draw("shear", lambda: (rng.uniform(-1, 1) * policy.shear,
                                   rng.uniform(-1, 1) * policy.shear)) if on.get("shear") else (0.0, 0.0)
    hflip = bool(draw("hflip", lambda: True)) if on.get("hflip") else False
    vflip = bool(draw("vflip", lambda: True)) if on.get("vflip") else False

    matrix, offset = affine_matrix((h, w), angle, zoom, shift, shear, hflip, vflip)
    img = image.astype(np.float64)
    msk = None if mask is None else np.asarray(mask).astype(np.float64)
    if not _is_identity(matrix, offset):
        img = warp(img, matrix, offset, order=1)
        if msk is not None:
            msk = warp(msk, matrix, offset, order=0)
    if on.get("elastic"):
        amp = draw("elastic", lambda: policy.elastic_amplitude)
        img, msk = elastic_deform(img, msk, policy.elastic_sigma, amp, rng)

    if on.get("intensity_scale"):
        img = img * draw("intensity_scale", lambda: rng.uniform(*policy.intensity_scale))
    if on.get("contrast"):
        delta = draw("contrast", lambda: rng.uniform(-policy.contrast_levels, policy.contrast_levels))
        img = (img - 127.5) * (1.0 + delta / 127.5) + 127.5
    if on.get("illumination"):
        slope, direction = draw("illumination", lambda: (rng.uniform(-policy.illumination_slope,
                                                                     policy.illumination_slope),
                                                         rng.uniform(0, 2 * math.pi)))
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = ((xx - (w - 1) / 2) * math.cos(direction) + (yy - (h - 1) / 2) * math.sin(direction)) / max(h, w)
        img = img * (1.0 + 2.0 * slope * ramp)
    if on.get("sharpness"):
        mode, sigma = draw("sharpness", lambda: (("unsharp", "blur")[int(rng.integers(2))],
                                                 rng.uniform(*policy.blur_sigma)))
        blurred = ndimage.gaussian_filter(img, sigma, mode="reflect")
        img = img + (img - blurred) if mode == "unsharp" else blurred
    if on.get("noise"):
        sigma = draw("noise", lambda: rng.uniform(0, policy.noise_sigma))
        img = img + rng.normal(0.0, sigma, size=img.shape)

    out_mask = None if msk is None else (msk > 0.5).astype(np.asarray(mask).dtype)
    return _restore(img, image), out_mask


def elastic_deform(image: np.ndarray, mask: Optional[np.ndarray], sigma: float, amplitude: float,
                   rng: np.random.Generator):
    """Smooth random warp; displacement is Gaussian-smoothed noise rescaled to ``amplitude`` pixels."""
    image = np.asarray(image)
    if amplitude == 0:
        return image.copy(), None if mask is None else np.asarray(mask).copy()
    h, w = image.shape
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma, mode="reflect")
        peak = np.abs(f).max()
        fields.append(f * (amplitude / peak) if peak > 0 else f)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + fields[0], xx + fields[1]]
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="reflect")
    msk = None
    if mask is not None:
        m = np.asarray(mask)
        msk = ndimage.map_coordinates(m.astype(np.float64), coords, order=0, mode="reflect").astype(m.dtype)
    if image.dtype == np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img, msk

"""Synthetic ultrasound phantoms standing in for the private tendon data.

Each phantom has a smooth, depth-attenuated background with multiplicative
speckle, a bright fibrillar elliptical band (the tendon, whose mask is the
ground truth) and darkened elliptical lesions. A sample is positive iff a
lesion centre lies inside the tendon at normalised radius >= 0.6.

With ``decoys`` enabled a second band with identical texture is drawn and
decoy lesions are placed in it (or in the background), so an image-only model
cannot tell a tendon lesion from a decoy.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .posinfo import build_position_maps

Range = Tuple[float, float]


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    tendon_major: Range = (18.0, 26.0)
    tendon_minor: Range = (6.0, 10.0)
    tendon_angle_deg: Range = (-25.0, 25.0)
    center_jitter: float = 6.0
    tendon_level: Range = (140.0, 175.0)
    background_level: Range = (55.0, 85.0)
    depth_attenuation: float = 0.3
    fibril_period: Range = (3.0, 5.0)
    fibril_amplitude: float = 0.15
    speckle_gamma: float = 0.35
    edge_blur: float = 0.7
    lesion_radius: Range = (2.5, 4.0)
    lesion_contrast: float = 0.25
    lesion_rate: float = 0.5
    positive_rate: float = 0.5
    peripheral_threshold: float = 0.6
    peripheral_band: Range = (0.66, 0.95)
    central_band: Range = (0.1, 0.5)
    central_rate: float = 0.6
    decoys: bool = False
    decoy_rate: float = 0.6
    decoy_in_band: float = 0.75

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "PhantomSpec":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)


def segmentation_spec(**overrides) -> PhantomSpec:
    """Default phantoms for the segmentation experiments (no decoys)."""
    return PhantomSpec(**overrides)


def classification_spec(**overrides) -> PhantomSpec:
    """Position-dependent recognition task: two look-alike bands and decoy lesions."""
    base = dict(tendon_major=(16.0, 22.0), tendon_minor=(5.0, 8.0), tendon_angle_deg=(-15.0, 15.0),
                center_jitter=4.0, decoys=True, lesion_radius=(3.5, 5.0), lesion_contrast=0.5)
    base.update(overrides)
    return PhantomSpec(**base)


def pretraining_spec(**overrides) -> PhantomSpec:
    """A related but different phantom population used for the first training phase."""
    base = dict(tendon_major=(14.0, 28.0), tendon_minor=(5.0, 12.0), tendon_angle_deg=(-35.0, 35.0),
                tendon_level=(120.0, 190.0), speckle_gamma=0.45, fibril_period=(2.5, 6.0))
    base.update(overrides)
    return PhantomSpec(**base)


@dataclass
class Lesion:
    x: int
    y: int
    radius: float
    kind: str  # "peripheral" | "central" | "decoy"


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    label: int
    id: str = ""
    fold: int = -1
    lesions: List[Lesion] = field(default_factory=list)


def _u(rng, r: Range) -> float:
    return float(rng.uniform(r[0], r[1]))


def _ellipse(size: int, cx: float, cy: float, a: float, b: float, angle: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, v


def _band(spec: PhantomSpec, rng, cy: float):
    size = spec.size
    a, b = _u(rng, spec.tendon_major), _u(rng, spec.tendon_minor)
    ang = math.radians(_u(rng, spec.tendon_angle_deg))
    cx = size / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cy = cy + rng.uniform(-spec.center_jitter / 2, spec.center_jitter / 2)
    inside, v = _ellipse(size, cx, cy, a, b, ang)
    period = _u(rng, spec.fibril_period)
    phase = rng.uniform(0, 2 * math.pi)
    texture = 1.0 + spec.fibril_amplitude * np.sin(2 * math.pi * v / period + phase)
    return inside, texture


def _pick(rng, mask: np.ndarray, rn: Optional[np.ndarray], band: Range) -> Optional[Tuple[int, int]]:
    if rn is None:
        ys, xs = np.nonzero(mask)
    else:
        ys, xs = np.nonzero(mask & (rn >= band[0]) & (rn <= band[1]))
    if ys.size == 0:
        return None
    i = int(rng.integers(ys.size))
    return int(xs[i]), int(ys[i])


def lesion_label(mask: np.ndarray, lesions: Sequence[Lesion], threshold: float = 0.6) -> int:
    """Positivity rule: any lesion centre inside the mask with normalised radius >= threshold."""
    rn = build_position_maps(mask).radius
    for les in lesions:
        if mask[les.y, les.x] and rn[les.y, les.x] >= threshold:
            return 1
    return 0


def generate_phantom(spec: PhantomSpec, seed: int, sample_id: str = "") -> Sample:
    rng = np.random.default_rng(seed)
    size = spec.size
    yy = np.mgrid[0:size, 0:size][0] / size

    low = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 8, mode="reflect")
    low = low / (np.abs(low).max() + 1e-12)
    base = _u(rng, spec.background_level) * (1 + 0.15 * low) * (1 - spec.depth_attenuation * yy)

    if spec.decoys:
        upper = bool(rng.integers(2))
        t_cy, d_cy = (size * 0.28, size * 0.72) if upper else (size * 0.72, size * 0.28)
    else:
        t_cy = size / 2
    tendon, t_tex = _band(spec, rng, t_cy)
    base = np.where(tendon, _u(rng, spec.tendon_level) * t_tex, base)
    distractor = None
    if spec.decoys:
        distractor, d_tex = _band(spec, rng, d_cy)
        distractor &= ~tendon
        base = np.where(distractor, _u(rng, spec.tendon_level) * d_tex, base)
    base = ndimage.gaussian_filter(base, spec.edge_blur, mode="reflect")

    lesions: List[Lesion] = []
    rn_t = build_position_maps(tendon).radius
    if spec.decoys:
        want_pos = rng.random() < spec.positive_rate
        if want_pos:
            spot = _pick(rng, tendon, rn_t, spec.peripheral_band)
            if spot:
                lesions.append(Lesion(*spot, _u(rng, spec.lesion_radius), "peripheral"))
        elif rng.random() < spec.central_rate:
            spot = _pick(rng, tendon, rn_t, spec.central_band)
            if spot:
                lesions.append(Lesion(*spot, _u(rng, spec.lesion_radius), "central"))
        if rng.random() < spec.decoy_rate:
            if distractor is not None and distractor.any() and rng.random() < spec.decoy_in_band:
                rn_d = build_position_maps(distractor).radius
                band = spec.peripheral_band if rng.random() < 0.5 else spec.central_band
                spot = _pick(rng, distractor, rn_d, band)
            else:
                spot = _pick(rng, ~(tendon | ndimage.binary_dilation(tendon, iterations=4)), None, (0, 1))
            if spot:
                lesions.append(Lesion(*spot, _u(rng, spec.lesion_radius), "decoy"))
    elif rng.random() < spec.lesion_rate:
        kind_band = spec.peripheral_band if rng.random() < 0.5 else spec.central_band
        spot = _pick(rng, tendon, rn_t, kind_band)
        if spot:
            kind = "peripheral" if kind_band is spec.peripheral_band else "central"
            lesions.append(Lesion(*spot, _u(rng, spec.lesion_radius), kind))

    xx = np.mgrid[0:size, 0:size][1]
    for les in lesions:
        ang = rng.uniform(0, math.pi)
        aspect = rng.uniform(0.7, 1.0)
        c, s = math.cos(ang), math.sin(ang)
        u = ((xx - les.x) * c + (yy * size - les.y) * s) / les.radius
        v = (-(xx - les.x) * s + (yy * size - les.y) * c) / (les.radius * aspect)
        prof = np.clip(1.5 - (u * u + v * v), 0, 1)
        base = base * (1 - spec.lesion_contrast * prof)

    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0, mode="reflect")
    img = base * (1 + spec.speckle_gamma * noise)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)
    mask = tendon.astype(np.uint8)
    label = lesion_label(mask, lesions, spec.peripheral_threshold)
    return Sample(image=image, mask=mask, label=label, id=sample_id, lesions=lesions)


def generate_dataset(spec: PhantomSpec, n: int, seed: int, k: int = 5) -> List[Sample]:
    """``n`` phantoms seeded per index, with stratified fold assignments."""
    samples = [generate_phantom(spec, seed_for(seed, i), f"s{i:04d}") for i in range(n)]
    labels = [s.label for s in samples]
    if k >= 2 and min(labels.count(0), labels.count(1)) >= k:
        folds = fold_split([s.id for s in samples], labels, k, seed)
    elif k >= 2:
        folds = {s.id: i % k for i, s in enumerate(samples)}
    else:
        folds = {s.id: -1 for s in samples}
    for s in samples:
        s.fold = folds[s.id]
    return samples


def seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def fold_split(ids: Sequence[str], labels: Sequence[int], k: int = 5, seed: int = 0) -> Dict[str, int]:
    """Stratified assignment of each id to one of ``k`` folds."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ids) != len(labels):
        raise ValueError("ids and labels differ in length")
    labels = [int(v) for v in labels]
    classes = sorted(set(labels))
    for c in classes:
        if labels.count(c) < k:
            raise ValueError(f"class {c} has fewer than {k} samples")
    rng = np.random.default_rng(seed)
    out: Dict[str, int] = {}
    offset = 0
    for c in classes:
        members = [i for i, lab in zip(ids, labels) if lab == c]
        perm = rng.permutation(len(members))
        for j, m in enumerate(perm):
            out[members[m]] = (offset + j) % k
        offset = (offset + len(members)) % k
    return out

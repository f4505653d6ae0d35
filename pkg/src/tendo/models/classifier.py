"""Tendinopathy classifier: encoder backbone plus dense top layers, and input assembly."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..engine import nn, ops
from ..engine.tensor import Tensor
from ..posinfo import PositionMaps
from .cells import BuildError
from .nasunet import Encoder, NASUNetConfig

SCENARIOS = ("OI", "WM", "PI")


@dataclass(frozen=True)
class ClassifierConfig:
    backbone: NASUNetConfig = field(default_factory=lambda: NASUNetConfig(levels=2, repeats=1, base_filters=8))
    width: float = 1.0
    dropout: float = 0.5
    num_classes: int = 2
    scenario: str = "PI"
    top_activation: str = "relu"

    @property
    def top_sizes(self) -> List[int]:
        return [max(1, int(round(1024 * self.width))), max(1, int(round(64 * self.width)))]

    def validate(self) -> None:
        if self.num_classes != 2:
            raise BuildError("the classifier is binary: num_classes must be 2")
        if self.scenario not in SCENARIOS:
            raise BuildError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.top_activation not in ("relu", "linear"):
            raise BuildError(f"top_activation must be 'relu' or 'linear', got {self.top_activation!r}")
        if not 0 <= self.dropout < 1 or self.width <= 0:
            raise BuildError(f"invalid classifier config {self}")
        self.backbone.validate()

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d


class Classifier(nn.Module):
    backbone_prefixes = ("backbone.",)

    def __init__(self, cfg: ClassifierConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.backbone = Encoder(cfg.backbone, rng)
        d1, d2 = cfg.top_sizes
        c = self.backbone.out_cur[0]
        self.fc1 = nn.Dense(c, d1, rng)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.fc2 = nn.Dense(d1, d2, rng)
        self.drop2 = nn.Dropout(cfg.dropout)
        self.fc3 = nn.Dense(d2, cfg.num_classes, rng)

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        self.drop1.rng = rng
        self.drop2.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        _, cur, _ = self.backbone(x)
        z = ops.global_avg_pool(ops.relu(cur))
        act = ops.relu if self.cfg.top_activation == "relu" else (lambda t: t)
        z = self.drop1(act(self.fc1(z)))
        z = self.drop2(act(self.fc2(z)))
        return ops.softmax(self.fc3(z))

    def param_group(self, name: str) -> str:
        return "backbone" if name.startswith(self.backbone_prefixes) else "new"


def build_classifier(cfg: ClassifierConfig, seed: int = 0) -> Classifier:
    return Classifier(cfg, np.random.default_rng(seed))


def normalize_image(image) -> np.ndarray:
    """8-bit raster to float32 in [0, 1]."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / np.float32(255.0)
    img = img.astype(np.float32)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("float images must already lie in [0, 1]")
    return img


def assemble_input(image, scenario: str, mask=None, posmaps: Optional[PositionMaps] = None) -> np.ndarray:
    """Three-channel ``(1, 3, h, w)`` network input for one scenario.

    OI replicates the image, WM stacks ``[img, mask, mask]`` and PI stacks
    ``[img, r_N, theta_N]`` (sentinels kept).
    """
    img = normalize_image(image)
    if scenario == "OI":
        chans = [img, img, img]
    elif scenario == "WM":
        if mask is None:
            raise ValueError("scenario WM requires a mask")
        m = (np.asarray(mask) != 0).astype(np.float32)
        if m.shape != img.shape:
            raise ValueError(f"mask shape {m.shape} does not match image {img.shape}")
        chans = [img, m, m]
    elif scenario == "PI":
        if posmaps is None:
            raise ValueError("scenario PI requires position maps")
        if posmaps.radius.shape != img.shape:
            raise ValueError(f"position maps {posmaps.radius.shape} do not match image {img.shape}")
        chans = [img, posmaps.radius.astype(np.float32), posmaps.angle.astype(np.float32)]
    else:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    return np.stack(chans)[None]

"""NASUNet segmentation network and its encoder.

Encoder: stride-2 stem, then per level ``repeats`` Normal cells followed by one
Reducing cell. Decoder: per level an Enlarging cell fed by both streams, then
``repeats`` Normal cells; the first of them takes as ``h_prev`` the output of
the last encoder Normal cell of the same level. Head: stride-2 transposed
convolution, 3x3 conv, 1x1 conv, sigmoid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..engine import nn, ops
from ..engine.tensor import Tensor
from .cells import BuildError, Cell, CellSpec, Shape3


@dataclass(frozen=True)
class NASUNetConfig:
    levels: int = 3
    repeats: int = 2
    base_filters: int = 32
    input_size: Tuple[int, int] = (64, 64)
    stem_stride2: bool = True
    filter_growth: int = 1
    head_filters: int = 0  # 0 -> max(base_filters // 2, 4)
    use_bn: bool = True
    in_channels: int = 3

    def validate(self) -> None:
        if self.levels < 1 or self.repeats < 0 or self.base_filters < 1:
            raise BuildError(f"invalid NASUNet config {self}")
        if self.filter_growth < 1:
            raise BuildError("filter_growth must be >= 1")
        div = self.divisor
        h, w = self.input_size
        if h % div or w % div:
            raise BuildError(f"input size {self.input_size} is not divisible by {div}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels + (1 if self.stem_stride2 else 0))

    def level_filters(self, level: int) -> int:
        """Filters used by the cells of 1-based ``level``."""
        return self.base_filters * self.filter_growth ** (level - 1)

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


class Encoder(nn.Module):
    """Stem and the Normal/Reducing ladder; records the skip tensor of every level."""

    def __init__(self, cfg: NASUNetConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        F = cfg.base_filters
        h, w = cfg.input_size
        s = 2 if cfg.stem_stride2 else 1
        self.stem = nn.Conv2d(cfg.in_channels, F, 3, rng, stride=s)
        self.stem_bn = nn.BatchNorm(F) if cfg.use_bn else nn.Identity()
        shape: Shape3 = (F, h // s, w // s)
        prev, cur = shape, shape
        self.cells: List[Cell] = []
        self.skip_index: List[int] = []
        self.level_shapes: List[Shape3] = []
        for level in range(1, cfg.levels + 1):
            f = cfg.level_filters(level)
            for _ in range(cfg.repeats):
                cell = Cell(CellSpec("normal", f, prev, cur, cfg.use_bn), rng)
                self.cells.append(cell)
                prev, cur = cur, cell.out_shape
            self.skip_index.append(len(self.cells) - 1 if cfg.repeats else -1)
            self.level_shapes.append(cur)
            red_f = cfg.level_filters(level + 1) if level < cfg.levels else f
            cell = Cell(CellSpec("reducing", red_f, prev, cur, cfg.use_bn), rng)
            self.cells.append(cell)
            prev, cur = cur, cell.out_shape
        self.out_prev, self.out_cur = prev, cur

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, List[Tensor]]:
        stem = self.stem_bn(self.stem(x))
        prev, cur = stem, stem
        skips: List[Tensor] = []
        level_end = set(self.skip_index)
        for i, cell in enumerate(self.cells):
            out = cell(prev, cur)
            prev, cur = cur, out
            if i in level_end:
                skips.append(out)
        if self.cfg.repeats == 0:
            skips = []
        return prev, cur, skips


class NASUNet(nn.Module):
    """Encoder-decoder segmentation network producing an ``(n, 1, h, w)`` map in (0, 1)."""

    backbone_prefixes = ("encoder.",)

    def __init__(self, cfg: NASUNetConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if cfg.repeats < 1:
            raise BuildError("NASUNet needs at least one Normal cell per level for its skips")
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        prev, cur = self.encoder.out_prev, self.encoder.out_cur
        self.decoder: List[Cell] = []
        self.decoder_skip: List[Optional[int]] = []
        for level in range(cfg.levels, 0, -1):
            f = cfg.level_filters(level)
            enl = Cell(CellSpec("enlarging", f, prev, cur, cfg.use_bn), rng)
            self.decoder.append(enl)
            self.decoder_skip.append(None)
            skip_shape = self.encoder.level_shapes[level - 1]
            if skip_shape[1:] != enl.out_shape[1:]:
                raise BuildError(f"skip {skip_shape} does not align with enlarged {enl.out_shape}")
            prev, cur = skip_shape, enl.out_shape
            for r in range(cfg.repeats):
                cell = Cell(CellSpec("normal", f, prev, cur, cfg.use_bn), rng)
                self.decoder.append(cell)
                self.decoder_skip.append(level - 1 if r == 0 else None)
                prev, cur = cur, cell.out_shape
        hf = cfg.head_filters or max(cfg.base_filters // 2, 4)
        s = 2 if cfg.stem_stride2 else 1
        self.head_up = nn.ReluConvBN(nn.ConvTranspose2d(cur[0], hf, 3, rng, stride=s), hf, cfg.use_bn)
        self.head_conv = nn.ReluConvBN(nn.Conv2d(hf, hf, 3, rng), hf, cfg.use_bn)
        self.head_out = nn.Conv2d(hf, 1, 1, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        expected = (self.cfg.in_channels,) + tuple(self.cfg.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ops.ShapeError(f"NASUNet expects (n, {expected}) input, got {x.shape}")
        prev, cur, skips = self.encoder(x)
        self.trace = {"skips": [s.shape for s in skips], "decoder_prev": []}
        for cell, skip in zip(self.decoder, self.decoder_skip):
            if cell.spec.kind == "enlarging":
                cur = cell(prev, cur)
                continue
            if skip is not None:
                prev = skips[skip]
            self.trace["decoder_prev"].append(prev.shape)
            out = cell(prev, cur)
            prev, cur = cur, out
        y = self.head_out(self.head_conv(self.head_up(cur)))
        return ops.sigmoid(y)

    def param_group(self, name: str) -> str:
        return "backbone" if name.startswith(self.backbone_prefixes) else "new"


def build_nasunet(cfg: NASUNetConfig, seed: int = 0) -> NASUNet:
    cfg.validate()
    return NASUNet(cfg, np.random.default_rng(seed))

"""Normal, Reducing and Enlarging cells with two-stream (h_prev, h_cur) wiring.

Every cell first brings its inputs to a common form:

* ``h``: the current stream ``h_cur`` projected to ``filters`` channels by
  ReLU -> 1x1 conv -> BN;
* ``p``: the previous stream ``h_prev`` adapted to ``filters`` channels at the
  resolution the cell's operations expect (1x1 conv, with stride 2 or a
  nearest-neighbour upsample when the resolutions differ). When ``h_prev``
  already has the right shape it is used untouched, so the Normal cell's skip
  carries it verbatim.

Branches are then combined pairwise by addition and the block outputs are
concatenated. The wiring lives in the ``TOPOLOGY`` table below; tests pin it.

Operation codes: ``sepK`` is ReLU -> separable KxK conv -> BN; ``avg3``/``max3``
are 3x3 pools; ``id`` passes its input through; ``tconvK`` is ReLU -> stride-2
transposed KxK conv -> BN; ``up`` is nearest-neighbour x2; ``upsep3`` is ``up``
followed by ``sep3``; ``avgup`` is ``avg3`` followed by ``up``.
In a Reducing cell every op reading ``h`` or ``p`` runs with stride 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..engine import nn, ops
from ..engine.tensor import Tensor

Shape3 = Tuple[int, int, int]  # (channels, height, width)

TOPOLOGY: Dict[str, Dict[str, object]] = {
    "normal": {
        "blocks": [
            ("sep3", "h", "id", "h"),
            ("sep3", "p", "sep5", "h"),
            ("avg3", "h", "id", "p"),
            ("avg3", "p", "avg3", "p"),
            ("sep5", "p", "sep3", "p"),
        ],
        "concat": ["p", "b0", "b1", "b2", "b3", "b4"],
    },
    "reducing": {
        "blocks": [
            ("sep5", "h", "sep7", "p"),
            ("max3", "h", "sep7", "p"),
            ("avg3", "h", "sep5", "p"),
            ("avg3", "b0", "id", "b1"),
            ("sep3", "b0", "max3", "h"),
        ],
        "concat": ["b1", "b2", "b3", "b4"],
    },
    "enlarging": {
        "blocks": [
            ("tconv3", "h", "avgup", "h"),
            ("tconv5", "h", "upsep3", "h"),
            ("sep3", "p", "up", "h"),
        ],
        "concat": ["b0", "b1", "b2"],
    },
}

# channel multiplier of the Enlarging cell output relative to ``filters``
ENLARGING_WIDTH = 2


class BuildError(ValueError):
    """Raised when a cell or network cannot be wired for the requested shapes."""


@dataclass(frozen=True)
class CellSpec:
    kind: str
    filters: int
    prev_shape: Shape3
    cur_shape: Shape3
    use_bn: bool = True

    def __post_init__(self):
        if self.kind not in TOPOLOGY:
            raise BuildError(f"unknown cell kind {self.kind!r}")
        if self.filters < 1:
            raise BuildError("filters must be positive")

    @property
    def out_shape(self) -> Shape3:
        c, h, w = self.cur_shape
        if self.kind == "normal":
            return (len(TOPOLOGY["normal"]["concat"]) * self.filters, h, w)
        if self.kind == "reducing":
            return (len(TOPOLOGY["reducing"]["concat"]) * self.filters, -(-h // 2), -(-w // 2))
        return (ENLARGING_WIDTH * self.filters, 2 * h, 2 * w)


class _Adapter(nn.Module):
    """Brings ``h_prev`` to ``filters`` channels at ``target`` resolution."""

    def __init__(self, shape: Shape3, target: Tuple[int, int], filters: int,
                 rng: np.random.Generator, use_bn: bool):
        super().__init__()
        c, h, w = shape
        th, tw = target
        self.upsample = False
        if (h, w) == (th, tw):
            if c == filters:
                self.mode = "identity"
                return
            self.mode = "conv"
            stride = 1
        elif (-(-h // 2), -(-w // 2)) == (th, tw):
            self.mode, stride = "stride", 2
        elif (2 * h, 2 * w) == (th, tw):
            self.mode, stride, self.upsample = "upsample", 1, True
        else:
            raise BuildError(f"cannot adapt h_prev of spatial size {(h, w)} to {(th, tw)}")
        self.op = nn.ReluConvBN(nn.Conv2d(c, filters, 1, rng, stride=stride), filters, use_bn)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "identity":
            return x
        y = self.op(x)
        return ops.nearest_upsample(y) if self.upsample else y


class _Op(nn.Module):
    def __init__(self, code: str, filters: int, stride: int, rng: np.random.Generator, use_bn: bool):
        super().__init__()
        self.code, self.stride = code, stride
        if code.startswith("sep") or code == "upsep3":
            k = 3 if code == "upsep3" else int(code[3:])
            self.layer = nn.ReluConvBN(nn.SeparableConv2d(filters, filters, k, rng, stride=stride),
                                       filters, use_bn)
        elif code.startswith("tconv"):
            k = int(code[5:])
            self.layer = nn.ReluConvBN(nn.ConvTranspose2d(filters, filters, k, rng, stride=2),
                                       filters, use_bn)
        elif code not in ("avg3", "max3", "id", "up", "avgup"):
            raise BuildError(f"unknown operation code {code!r}")

    def forward(self, x: Tensor) -> Tensor:
        code = self.code
        if code == "id":
            if self.stride != 1:
                raise BuildError("identity cannot change resolution")
            return x
        if code == "avg3":
            return ops.pool2d(x, "avg", 3, self.stride)
        if code == "max3":
            return ops.pool2d(x, "max", 3, self.stride)
        if code == "up":
            return ops.nearest_upsample(x)
        if code == "avgup":
            return ops.nearest_upsample(ops.pool2d(x, "avg", 3, 1))
        if code == "upsep3":
            return self.layer(ops.nearest_upsample(x))
        return self.layer(x)


class Cell(nn.Module):
    """One structuring cell built from a :class:`CellSpec` and the topology table."""

    def __init__(self, spec: CellSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        topo = TOPOLOGY[spec.kind]
        F = spec.filters
        c, h, w = spec.cur_shape
        if min(h, w) < 1:
            raise BuildError(f"invalid h_cur shape {spec.cur_shape}")
        target = (2 * h, 2 * w) if spec.kind == "enlarging" else (h, w)
        self.project = nn.ReluConvBN(nn.Conv2d(c, F, 1, rng), F, spec.use_bn)
        self.adapt = _Adapter(spec.prev_shape, target, F, rng, spec.use_bn)
        self.blocks = []
        for left, lin, right, rin in topo["blocks"]:
            ls = 2 if spec.kind == "reducing" and lin in ("h", "p") else 1
            rs = 2 if spec.kind == "reducing" and rin in ("h", "p") else 1
            self.blocks.append(_Pair(_Op(left, F, ls, rng, spec.use_bn), lin,
                                     _Op(right, F, rs, rng, spec.use_bn), rin))
        self.concat = list(topo["concat"])
        if spec.kind == "enlarging":
            width = ENLARGING_WIDTH * F
            self.merge = nn.ReluConvBN(nn.Conv2d(len(self.concat) * F, width, 1, rng), width, spec.use_bn)

    @property
    def out_shape(self) -> Shape3:
        return self.spec.out_shape

    def forward(self, h_prev: Tensor, h_cur: Tensor) -> Tensor:
        self._check(h_prev, self.spec.prev_shape, "h_prev")
        self._check(h_cur, self.spec.cur_shape, "h_cur")
        streams = {"h": self.project(h_cur), "p": self.adapt(h_prev)}
        for i, pair in enumerate(self.blocks):
            streams[f"b{i}"] = pair(streams)
        out = ops.concat_channels([streams[k] for k in self.concat])
        if self.spec.kind == "enlarging":
            out = self.merge(out)
        return out

    @staticmethod
    def _check(x: Tensor, shape: Shape3, name: str) -> None:
        if tuple(x.shape[1:]) != tuple(shape):
            raise ops.ShapeError(f"{name} has shape {x.shape[1:]}, cell was built for {shape}")


class _Pair(nn.Module):
    def __init__(self, left: _Op, lin: str, right: _Op, rin: str):
        super().__init__()
        self.left, self.right = left, right
        self.lin, self.rin = lin, rin

    def forward(self, streams: Dict[str, Tensor]) -> Tensor:
        return ops.add(self.left(streams[self.lin]), self.right(streams[self.rin]))


def _spec(kind: str, filters: int, prev_shape: Shape3, cur_shape: Optional[Shape3],
          use_bn: bool) -> CellSpec:
    return CellSpec(kind, filters, tuple(prev_shape), tuple(cur_shape or prev_shape), use_bn)


def build_normal_cell(spec: CellSpec, rng: Optional[np.random.Generator] = None) -> Cell:
    if spec.kind != "normal":
        raise BuildError("spec is not a normal cell")
    return Cell(spec, rng or np.random.default_rng(0))


def build_reducing_cell(spec: CellSpec, rng: Optional[np.random.Generator] = None) -> Cell:
    if spec.kind != "reducing":
        raise BuildError("spec is not a reducing cell")
    return Cell(spec, rng or np.random.default_rng(0))


def build_enlarging_cell(spec: CellSpec, rng: Optional[np.random.Generator] = None) -> Cell:
    if spec.kind != "enlarging":
        raise BuildError("spec is not an enlarging cell")
    return Cell(spec, rng or np.random.default_rng(0))


def branch_count(kind: str) -> int:
    return len(TOPOLOGY[kind]["concat"])


def concat_sources(kind: str) -> List[str]:
    return list(TOPOLOGY[kind]["concat"])

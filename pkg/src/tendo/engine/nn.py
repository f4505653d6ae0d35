"""Parameter containers and the layers the cells are assembled from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                   fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Tree of named parameters, buffers and sub-modules.

    Registration follows attribute assignment order, which fixes the
    parameter ordering used by checkpoints and optimisers.
    """

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Module, Tensor)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for key, val in self._children():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[prefix + key] = val
            else:
                out.update(val.named_parameters(prefix + key + "."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for key, val in getattr(self, "_buffers", {}).items():
            out[prefix + key] = val
        for key, val in self._children():
            if isinstance(val, Module):
                out.update(val.named_buffers(prefix + key + "."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"param/{k}": v.data for k, v in self.named_parameters().items()}
        state.update({f"buffer/{k}": v for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in params.items():
            src = np.asarray(state[f"param/{k}"])
            if src.shape != p.shape:
                raise ValueError(f"{k}: shape {src.shape} does not match {p.shape}")
            p.data = src.astype(p.dtype, copy=True)
        for k, b in buffers.items():
            b[...] = state[f"buffer/{k}"]

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (64-bit mode for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            bufs = getattr(m, "_buffers", None)
            if bufs:
                for k in list(bufs):
                    bufs[k] = bufs[k].astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = False, padding: str = "same"):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = parameter(glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k))
        self.bias = parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class SeparableConv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.depthwise = parameter(glorot_uniform(rng, (c_in, 1, k, k), k * k, k * k))
        self.pointwise = parameter(glorot_uniform(rng, (c_out, c_in, 1, 1), c_in, c_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.separable_conv2d(x, self.depthwise, self.pointwise, self.stride)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 2,
                 bias: bool = False):
        super().__init__()
        self.stride = stride
        self.weight = parameter(glorot_uniform(rng, (c_in, c_out, k, k), c_in * k * k, c_out * k * k))
        self.bias = parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-3):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter(np.ones(channels, np.float32))
        self.beta = parameter(np.zeros(channels, np.float32))
        self._buffers = OrderedDict(
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = parameter(glorot_uniform(rng, (d_in, d_out), d_in, d_out))
        self.bias = parameter(np.zeros(d_out, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class ReluConvBN(Module):
    """ReLU, then a convolution, then optional batch norm (the NASNet ordering)."""

    def __init__(self, conv: Module, channels: int, use_bn: bool = True):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm(channels) if use_bn else Identity()

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(ops.relu(x)))


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.rng: Optional[np.random.Generator] = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.rate, self.training, self.rng)

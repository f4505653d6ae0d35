"""Differentiable operations needed by the segmentation and recognition networks.

Same padding is zero padding with output size ``ceil(size / stride)``; when the
total padding is odd the extra row/column goes at the bottom/right.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import Function, Tensor


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


def same_pads(size: int, k: int, stride: int) -> Tuple[int, int, int]:
    """Return ``(out, before, after)`` for same padding along one axis."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _pads(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        ho, pt, pb = same_pads(h, kh, stride)
        wo, pl, pr = same_pads(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"valid padding needs input >= kernel, got {(h, w)} vs {(kh, kw)}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _pad(x: np.ndarray, p, value: float = 0.0) -> np.ndarray:
    pt, pb, pl, pr = p
    if not (pt or pb or pl or pr):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=value)


def _crop(x: np.ndarray, p) -> np.ndarray:
    pt, pb, pl, pr = p
    return x[:, :, pt:x.shape[2] - pb, pl:x.shape[3] - pr]


def _check4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an (n, c, h, w) tensor, got shape {x.shape}")


def _tap(a: np.ndarray, ky: int, kx: int, ho: int, wo: int, s: int) -> np.ndarray:
    return a[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]


# ---------------------------------------------------------------- convolution

class Conv2d(Function):
    def forward(self, x, w, b=None, stride=1, padding="same"):
        _check4(x, "conv2d")
        co, ci, kh, kw = w.shape
        if x.shape[1] != ci:
            raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weights expect {ci}")
        if stride not in (1, 2):
            raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
        if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError("conv2d: same padding needs odd kernel sizes")
        n, _, h, wd = x.shape
        ho, wo, p = _pads(h, wd, kh, kw, stride, padding)
        self.meta = (stride, p, x.shape, ho, wo)
        if kh == 1 and kw == 1 and stride == 1:
            self.cols = None
            self.x = x
            out = np.matmul(w.reshape(co, ci), x.reshape(n, ci, h * wd)).reshape(n, co, h, wd)
        else:
            xp = _pad(x, p)
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
            # im2col: (n, ho, wo, ci, kh, kw)
            self.cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
            out = np.tensordot(self.cols, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        self.w = w
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, g):
        w = self.w
        co, ci, kh, kw = w.shape
        stride, p, xshape, ho, wo = self.meta
        n = xshape[0]
        gb = g.sum(axis=(0, 2, 3)) if len(self.inputs) > 2 else None
        if self.cols is None:
            g2 = g.reshape(n, co, -1)
            x2 = self.x.reshape(n, ci, -1)
            gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gx = np.matmul(w.reshape(co, ci).T, g2).reshape(xshape)
        else:
            gw = np.tensordot(g, self.cols, axes=([0, 2, 3], [0, 1, 2]))
            gcols = np.tensordot(g.transpose(0, 2, 3, 1), w, axes=([3], [0]))  # (n,ho,wo,ci,kh,kw)
            hp = xshape[2] + p[0] + p[1]
            wp = xshape[3] + p[2] + p[3]
            gxp = np.zeros((n, ci, hp, wp), dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    _tap(gxp, ky, kx, ho, wo, stride)[...] += gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            gx = _crop(gxp, p)
        out = [gx, gw.astype(w.dtype, copy=False)]
        if gb is not None:
            out.append(gb)
        return out


def conv2d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Dense 2-D convolution (cross-correlation) with ``(co, ci, kh, kw)`` weights."""
    if bias is None:
        return Conv2d.apply(x, weights, stride=stride, padding=padding)
    return Conv2d.apply(x, weights, bias, stride=stride, padding=padding)


class DepthwiseConv2d(Function):
    def forward(self, x, w, stride=1, padding="same"):
        _check4(x, "depthwise_conv2d")
        c, one, kh, kw = w.shape
        if one != 1 or x.shape[1] != c:
            raise ShapeError(f"depthwise weights {w.shape} do not match {x.shape[1]} input channels")
        if stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {stride}")
        n, _, h, wd = x.shape
        ho, wo, p = _pads(h, wd, kh, kw, stride, padding)
        xp = np.ascontiguousarray(_pad(x, p))
        w = np.ascontiguousarray(w.astype(xp.dtype, copy=False))
        self.xp, self.w, self.meta = xp, w, (stride, p, x.shape, ho, wo)
        return _kernels.depthwise_forward(xp, w, stride, ho, wo)

    def backward(self, g):
        stride, p, xshape, ho, wo = self.meta
        gxp, gw = _kernels.depthwise_backward(self.xp, self.w, np.ascontiguousarray(g), stride)
        return _crop(gxp, p), gw


def depthwise_conv2d(x: Tensor, weights: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    return DepthwiseConv2d.apply(x, weights, stride=stride, padding=padding)


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor, stride: int = 1,
                     padding: str = "same", bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel spatial filter followed by 1x1 channel mixing."""
    return conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise, bias)


class ConvTranspose2d(Function):
    """Adjoint of the same-padded strided :class:`Conv2d` with identical weights.

    Weights are ``(c_in, c_out, kh, kw)``: the layout of the forward convolution
    that maps ``c_out`` channels to ``c_in``. Output spatial size is exactly
    ``stride * input``.
    """

    def forward(self, y, w, b=None, stride=2):
        _check4(y, "transposed_conv2d")
        cy, co, kh, kw = w.shape
        if y.shape[1] != cy:
            raise ShapeError(f"transposed_conv2d: input has {y.shape[1]} channels, weights expect {cy}")
        if stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {stride}")
        n, _, h, wd = y.shape
        oh, ow = stride * h, stride * wd
        _, pt, pb = same_pads(oh, kh, stride)
        _, pl, pr = same_pads(ow, kw, stride)
        p = (pt, pb, pl, pr)
        self.y, self.w, self.meta = y, w, (stride, p, (oh, ow))
        cols = np.tensordot(y.transpose(0, 2, 3, 1), w, axes=([3], [0]))  # (n,h,w,co,kh,kw)
        full = np.zeros((n, co, oh + pt + pb, ow + pl + pr), dtype=np.result_type(y, w))
        for ky in range(kh):
            for kx in range(kw):
                _tap(full, ky, kx, h, wd, stride)[...] += cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        out = _crop(full, p)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, g):
        y, w = self.y, self.w
        stride, p, _ = self.meta
        cy, co, kh, kw = w.shape
        n, _, h, wd = y.shape
        gp = _pad(g, p)
        win = sliding_window_view(gp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))  # (n,h,w,co,kh,kw)
        gy = np.tensordot(cols, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(y, cols, axes=([0, 2, 3], [0, 1, 2]))
        out = [np.ascontiguousarray(gy), gw.astype(w.dtype, copy=False)]
        if len(self.inputs) > 2:
            out.append(g.sum(axis=(0, 2, 3)))
        return out


def transposed_conv2d(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    if bias is None:
        return ConvTranspose2d.apply(x, weights, stride=stride)
    return ConvTranspose2d.apply(x, weights, bias, stride=stride)


# ---------------------------------------------------------------- pooling

class AvgPool2d(Function):
    def forward(self, x, k=3, stride=1, padding="same"):
        _check4(x, "avg_pool2d")
        n, c, h, w = x.shape
        ho, wo, p = _pads(h, w, k, k, stride, padding)
        xp = _pad(x, p)
        ones = _pad(np.ones((1, 1, h, w), dtype=x.dtype), p)
        acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
        cnt = np.zeros((1, 1, ho, wo), dtype=x.dtype)
        for ky in range(k):
            for kx in range(k):
                acc += _tap(xp, ky, kx, ho, wo, stride)
                cnt += _tap(ones, ky, kx, ho, wo, stride)
        self.inv = 1.0 / cnt
        self.meta = (k, stride, p, x.shape, ho, wo)
        return acc * self.inv

    def backward(self, g):
        k, s, p, xshape, ho, wo = self.meta
        gs = g * self.inv
        gxp = np.zeros((xshape[0], xshape[1], xshape[2] + p[0] + p[1], xshape[3] + p[2] + p[3]), dtype=g.dtype)
        for ky in range(k):
            for kx in range(k):
                _tap(gxp, ky, kx, ho, wo, s)[...] += gs
        return (_crop(gxp, p),)


class MaxPool2d(Function):
    def forward(self, x, k=3, stride=1, padding="same"):
        _check4(x, "max_pool2d")
        n, c, h, w = x.shape
        ho, wo, p = _pads(h, w, k, k, stride, padding)
        xp = _pad(x, p, value=-np.inf)
        out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
        arg = np.zeros((n, c, ho, wo), dtype=np.int16)
        t = 0
        for ky in range(k):
            for kx in range(k):
                v = _tap(xp, ky, kx, ho, wo, stride)
                better = v > out
                out = np.where(better, v, out)
                arg[better] = t
                t += 1
        self.arg, self.meta = arg, (k, stride, p, x.shape, ho, wo)
        return out

    def backward(self, g):
        k, s, p, xshape, ho, wo = self.meta
        gxp = np.zeros((xshape[0], xshape[1], xshape[2] + p[0] + p[1], xshape[3] + p[2] + p[3]), dtype=g.dtype)
        t = 0
        for ky in range(k):
            for kx in range(k):
                _tap(gxp, ky, kx, ho, wo, s)[...] += np.where(self.arg == t, g, 0)
                t += 1
        return (_crop(gxp, p),)


def pool2d(x: Tensor, kind: str, k: int = 3, stride: int = 1, padding: str = "same") -> Tensor:
    if k not in (2, 3):
        raise ShapeError(f"pool window must be 2 or 3, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"pool stride must be 1 or 2, got {stride}")
    if kind == "avg":
        return AvgPool2d.apply(x, k=k, stride=stride, padding=padding)
    if kind == "max":
        return MaxPool2d.apply(x, k=k, stride=stride, padding=padding)
    raise ValueError(f"pool kind must be 'avg' or 'max', got {kind!r}")


class Upsample(Function):
    def forward(self, x, factor=2):
        _check4(x, "nearest_upsample")
        n, c, h, w = x.shape
        self.f = factor
        out = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, factor, w, factor))
        return out.reshape(n, c, h * factor, w * factor)

    def backward(self, g):
        n, c, H, W = g.shape
        f = self.f
        return (g.reshape(n, c, H // f, f, W // f, f).sum(axis=(3, 5)),)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ShapeError(f"only factor 2 is supported, got {factor}")
    return Upsample.apply(x, factor=factor)


class GlobalAvgPool(Function):
    def forward(self, x):
        _check4(x, "global_avg_pool")
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, g):
        n, c, h, w = self.shape
        return (np.broadcast_to((g / (h * w))[:, :, None, None], self.shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


# ---------------------------------------------------------------- structure

class Concat(Function):
    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs:
            _check4(x, "concat_channels")
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"concat_channels: spatial mismatch {x.shape} vs {ref}")
        self.splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, g):
        return np.split(g, self.splits, axis=1)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    return Concat.apply(*xs)


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    out, start = [], 0
    for s in sizes:
        out.append(Slice.apply(x, start=start, stop=start + s))
        start += s
    return out


class Slice(Function):
    def forward(self, x, start, stop):
        self.shape, self.bounds = x.shape, (start, stop)
        return x[:, start:stop]

    def backward(self, g):
        gx = np.zeros(self.shape, dtype=g.dtype)
        gx[:, self.bounds[0]:self.bounds[1]] = g
        return (gx,)


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, g):
        return g, g


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, g):
        return (g * g.dtype.type(self.factor),)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return Mul.apply(a, b)
    return Scale.apply(a, factor=float(b))


class Total(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, g):
        return (np.full(self.shape, g, dtype=g.dtype),)


def total(x: Tensor) -> Tensor:
    return Total.apply(x)


class Flatten(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return (g.reshape(self.shape),)


def flatten(x: Tensor) -> Tensor:
    return Flatten.apply(x)


# ---------------------------------------------------------------- dense / activations

class Dense(Function):
    def forward(self, x, w, b=None):
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
        self.x, self.w = x, w
        out = x @ w
        if b is not None:
            out = out + b
        return out

    def backward(self, g):
        out = [g @ self.w.T, self.x.T @ g]
        if len(self.inputs) > 2:
            out.append(g.sum(axis=0))
        return out


def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weights + bias`` with ``(d_in, d_out)`` weights."""
    if bias is None:
        return Dense.apply(x, weights)
    return Dense.apply(x, weights, bias)


class ReLU(Function):
    def forward(self, x):
        self.out = _kernels.relu_forward(np.ascontiguousarray(x))
        return self.out

    def backward(self, g):
        return (_kernels.relu_backward(self.out, np.ascontiguousarray(g)),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class Softmax(Function):
    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


def softmax(x: Tensor) -> Tensor:
    """Softmax over axis 1 (classes) of an ``(n, k)`` tensor."""
    return Softmax.apply(x)


class Dropout(Function):
    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, g):
        return (g * self.mask,)


def dropout(x: Tensor, rate: float, train_mode: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: surviving units are scaled by ``1 / keep`` while training."""
    if not train_mode or rate <= 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return Dropout.apply(x, mask=mask)


class BatchNorm(Function):
    def forward(self, x, gamma, beta, running_mean, running_var, train_mode=True,
                momentum=0.9, eps=1e-3):
        x3 = np.ascontiguousarray(x).reshape(x.shape[0], x.shape[1], -1)
        if train_mode:
            mean, var = _kernels.bn_stats(x3)
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var
        else:
            mean = running_mean.astype(np.float64)
            var = running_var.astype(np.float64)
        inv = 1.0 / np.sqrt(var + eps)
        out, self.xhat = _kernels.bn_apply(x3, mean, inv, gamma.astype(np.float64),
                                           beta.astype(np.float64))
        self.inv, self.gamma = inv, gamma.astype(np.float64)
        self.meta = (x.shape, train_mode, gamma.dtype)
        return out.reshape(x.shape)

    def backward(self, g):
        shape, train_mode, pdt = self.meta
        g3 = np.ascontiguousarray(g).reshape(shape[0], shape[1], -1)
        gx, ggamma, gbeta = _kernels.bn_backward(g3, self.xhat, self.inv, self.gamma, train_mode)
        return gx.reshape(shape), ggamma.astype(pdt), gbeta.astype(pdt)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train_mode: bool, momentum: float = 0.9,
               eps: float = 1e-3) -> Tensor:
    """Per-channel batch normalisation; running statistics are updated in place while training."""
    return BatchNorm.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                           train_mode=train_mode, momentum=momentum, eps=eps)


class CrossEntropy(Function):
    """Mean categorical cross-entropy of softmax probabilities against integer labels."""

    def forward(self, probs, labels, clamp=1e-7):
        n = probs.shape[0]
        idx = (np.arange(n), labels.astype(np.int64))
        p = probs[idx].astype(np.float64)
        self.keep = p >= clamp
        self.pc = np.maximum(p, clamp)
        self.idx, self.shape = idx, probs.shape
        return np.asarray(-np.log(self.pc).mean(), dtype=probs.dtype)

    def backward(self, g):
        n = self.shape[0]
        gp = np.zeros(self.shape, dtype=g.dtype)
        gp[self.idx] = np.where(self.keep, -1.0 / (n * self.pc), 0.0) * g
        return (gp,)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    return CrossEntropy.apply(probs, labels=np.asarray(labels))


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, g):
        return (g / self.x,)


def output_size(size: int, k: int, stride: int, padding: str = "same") -> int:
    """Spatial output size of conv/pool along one axis."""
    if padding == "same":
        return math.ceil(size / stride)
    return (size - k) // stride + 1

"""Central-difference gradient checks in 64-bit precision.

``grad_check`` compares the analytic gradient of a scalar function against
``(f(x + h) - f(x - h)) / 2h`` for every element of every input. The
relative error of an input is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, floor)``, i.e. measured against the gradient's own scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .engine import ops
from .engine.tensor import Tensor, backward
from .objective import LossConfig, hybrid_loss_grad, hybrid_loss_tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    name: str
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), _FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def grad_check(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray], name: str = "",
               tolerance: float = DEFAULT_TOLERANCE, step: float = DEFAULT_STEP,
               wrt: Optional[Tuple[str, ...]] = None) -> GradCheckReport:
    """Check ``fn(**tensors) -> scalar Tensor`` for every input listed in ``wrt`` (default: all)."""
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    wrt = tuple(arrays) if wrt is None else wrt
    tensors = {k: Tensor(a, requires_grad=k in wrt) for k, a in arrays.items()}
    out = fn(**tensors)
    backward(out)
    errors = {}
    for k in wrt:
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arrays[k])

        def f() -> float:
            return float(fn(**{j: Tensor(a) for j, a in arrays.items()}).data)

        errors[k] = relative_error(analytic, numeric_grad(f, arrays[k], step))
    return GradCheckReport(name, errors, tolerance)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalarise an op output with fixed random weights so every element matters."""
    return ops.total(ops.mul(out, Tensor(w)))


def _away_from_kinks(rng, shape, gap=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + np.abs(x)), x)


def _distinct(rng, shape):
    """Values with well separated ranks so max-pool windows have a clear winner."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n * 4.0 - 2.0)


def op_cases(seed: int = 0) -> List[Tuple[str, Callable[..., Tensor], Dict[str, np.ndarray]]]:
    """One small case per differentiable op: ``(name, fn, inputs)``."""
    rng = np.random.default_rng(seed)
    x = lambda *s: rng.standard_normal(s)  # noqa: E731
    cases = []

    def add_case(name, make, inputs, out_shape):
        w = _probe(rng, out_shape)
        cases.append((name, lambda **t: _weighted(make(**t), w), inputs))

    add_case("conv2d_s1_same", lambda x, w, b: ops.conv2d(x, w, b), dict(x=x(2, 3, 5, 6), w=x(4, 3, 3, 3), b=x(4)), (2, 4, 5, 6))
    add_case("conv2d_s2_same", lambda x, w: ops.conv2d(x, w, stride=2), dict(x=x(1, 2, 7, 6), w=x(3, 2, 3, 3)), (1, 3, 4, 3))
    add_case("conv2d_valid", lambda x, w: ops.conv2d(x, w, padding="valid"), dict(x=x(1, 2, 5, 5), w=x(2, 2, 2, 2)), (1, 2, 4, 4))
    add_case("conv2d_1x1", lambda x, w: ops.conv2d(x, w), dict(x=x(2, 3, 4, 4), w=x(5, 3, 1, 1)), (2, 5, 4, 4))
    add_case("depthwise_conv2d_s1", lambda x, w: ops.depthwise_conv2d(x, w), dict(x=x(2, 3, 6, 5), w=x(3, 1, 5, 5)), (2, 3, 6, 5))
    add_case("depthwise_conv2d_s2", lambda x, w: ops.depthwise_conv2d(x, w, stride=2), dict(x=x(1, 2, 7, 7), w=x(2, 1, 3, 3)), (1, 2, 4, 4))
    add_case("separable_conv2d", lambda x, d, p: ops.separable_conv2d(x, d, p, 2),
             dict(x=x(1, 3, 6, 6), d=x(3, 1, 3, 3), p=x(4, 3, 1, 1)), (1, 4, 3, 3))
    add_case("transposed_conv2d", lambda x, w, b: ops.transposed_conv2d(x, w, b),
             dict(x=x(2, 3, 3, 4), w=x(3, 2, 3, 3), b=x(2)), (2, 2, 6, 8))
    add_case("transposed_conv2d_k5", lambda x, w: ops.transposed_conv2d(x, w),
             dict(x=x(1, 2, 3, 3), w=x(2, 2, 5, 5)), (1, 2, 6, 6))
    add_case("avg_pool_k3_s1", lambda x: ops.pool2d(x, "avg", 3, 1), dict(x=x(1, 2, 5, 5)), (1, 2, 5, 5))
    add_case("avg_pool_k3_s2", lambda x: ops.pool2d(x, "avg", 3, 2), dict(x=x(1, 2, 5, 6)), (1, 2, 3, 3))
    add_case("max_pool_k3_s2", lambda x: ops.pool2d(x, "max", 3, 2), dict(x=_distinct(rng, (1, 2, 5, 6))), (1, 2, 3, 3))
    add_case("max_pool_k2_s2_valid", lambda x: ops.pool2d(x, "max", 2, 2, "valid"), dict(x=_distinct(rng, (1, 2, 4, 4))), (1, 2, 2, 2))
    add_case("nearest_upsample", lambda x: ops.nearest_upsample(x), dict(x=x(1, 2, 3, 3)), (1, 2, 6, 6))
    add_case("global_avg_pool", lambda x: ops.global_avg_pool(x), dict(x=x(2, 3, 4, 4)), (2, 3))
    add_case("concat_channels", lambda a, b: ops.concat_channels([a, b]), dict(a=x(1, 2, 3, 3), b=x(1, 3, 3, 3)), (1, 5, 3, 3))
    add_case("split_channels", lambda a: ops.split_channels(a, [1, 2])[1], dict(a=x(1, 3, 3, 3)), (1, 2, 3, 3))
    add_case("add", lambda a, b: ops.add(a, b), dict(a=x(1, 2, 3, 3), b=x(1, 2, 3, 3)), (1, 2, 3, 3))
    add_case("mul", lambda a, b: ops.mul(a, b), dict(a=x(1, 2, 3, 3), b=x(1, 2, 3, 3)), (1, 2, 3, 3))
    add_case("scale", lambda a: ops.mul(a, 0.37), dict(a=x(1, 2, 3, 3)), (1, 2, 3, 3))
    add_case("flatten", lambda a: ops.flatten(a), dict(a=x(2, 2, 3, 3)), (2, 18))
    add_case("dense", lambda x, w, b: ops.dense(x, w, b), dict(x=x(3, 5), w=x(5, 4), b=x(4)), (3, 4))
    add_case("relu", lambda a: ops.relu(a), dict(a=_away_from_kinks(rng, (2, 3, 4, 4))), (2, 3, 4, 4))
    add_case("sigmoid", lambda a: ops.sigmoid(a), dict(a=x(2, 1, 4, 4)), (2, 1, 4, 4))
    add_case("softmax", lambda a: ops.softmax(a), dict(a=x(4, 3)), (4, 3))
    mask = (rng.random((2, 3, 4, 4)) < 0.7) / 0.7
    add_case("dropout", lambda a: ops.Dropout.apply(a, mask=mask), dict(a=x(2, 3, 4, 4)), (2, 3, 4, 4))
    c = 3
    add_case("batch_norm_train",
             lambda x, g, b: ops.batch_norm(x, g, b, np.zeros(c), np.ones(c), True),
             dict(x=x(4, c, 3, 3), g=x(c), b=x(c)), (4, c, 3, 3))
    rm, rv = rng.standard_normal(c), rng.random(c) + 0.5
    add_case("batch_norm_eval",
             lambda x, g, b: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), False),
             dict(x=x(2, c, 3, 3), g=x(c), b=x(c)), (2, c, 3, 3))
    add_case("log", lambda a: ops.log(a), dict(a=rng.random((1, 1, 3, 3)) + 0.5), (1, 1, 3, 3))
    labels = rng.integers(0, 3, size=5)
    cases.append(("cross_entropy", lambda p: ops.cross_entropy(ops.softmax(p), labels), dict(p=x(5, 3))))
    g = (rng.random((2, 1, 6, 6)) < 0.4).astype(np.float64)
    cases.append(("hybrid_loss", lambda p: hybrid_loss_tensor(p, g), dict(p=rng.uniform(0.05, 0.95, (2, 1, 6, 6)))))
    return cases


def check_ops(tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> List[GradCheckReport]:
    return [grad_check(fn, inputs, name, tolerance) for name, fn, inputs in op_cases(seed)]


def check_hybrid_loss(p: np.ndarray, g: np.ndarray, cfg: LossConfig = LossConfig(),
                      step: float = DEFAULT_STEP) -> float:
    """Relative error of the closed-form loss gradient against central differences."""
    from .objective import hybrid_loss

    p = np.array(p, dtype=np.float64)
    analytic = hybrid_loss_grad(p, g, cfg)
    numeric = numeric_grad(lambda: hybrid_loss(p, g, cfg), p, step)
    return relative_error(analytic, numeric)


def adjoint_error(seed: int = 0, shape=(2, 3, 8, 6), c_out: int = 4, k: int = 3) -> float:
    """Relative gap between <conv_s2(x; W), y> and <x, tconv_s2(y; W)> for even-sized ``x``.

    The transposed conv takes the conv's ``(c_out, c_in, k, k)`` weight unchanged.
    """
    if shape[2] % 2 or shape[3] % 2:
        raise ValueError("adjointness holds for even spatial sizes")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((c_out, shape[1], k, k))
    y_shape = (shape[0], c_out, -(-shape[2] // 2), -(-shape[3] // 2))
    y = rng.standard_normal(y_shape)
    lhs = float(np.sum(ops.conv2d(Tensor(x), Tensor(w), stride=2).data * y))
    ty = ops.transposed_conv2d(Tensor(y), Tensor(w)).data
    rhs = float(np.sum(x * ty))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), _FLOOR)

"""Tensor type and the reverse-mode machinery shared by every operation."""
from __future__ import annotations

import contextlib
from typing import Any, Iterator, Optional, Sequence, Tuple

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float array with an optional gradient buffer.

    Image tensors use the ``(n, c, h, w)`` row-major layout. Vectors coming out
    of global pooling or dense layers are ``(n, d)``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None,
                 name: Optional[str] = None, _ctx: Optional["Function"] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx = _ctx
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic used by the cells and tests; defined in ops to avoid a cycle
    def __add__(self, other: "Tensor") -> "Tensor":
        from .ops import add
        return add(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from .ops import total
        return total(self)


class Function:
    """Base class of a differentiable op.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient (or ``None``) per tensor input, in input order.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=needs, _ctx=fn if needs else None)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``.

    Leaf gradients are overwritten, never accumulated across calls.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._ctx is None:
        raise RuntimeError("backward called on a tensor with no recorded forward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g
            continue
        for parent, pg in zip(node._ctx.inputs, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{type(node._ctx).__name__} produced gradient {pg.shape} for input {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

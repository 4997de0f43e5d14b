"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op is a :class:`Function` subclass. Calling
``Fn.apply(*tensors, **kwargs)`` runs ``forward`` on the raw arrays and, when
any input requires a gradient, links the result to a :class:`Node` so that
:func:`backward` can replay the recorded ops in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Any, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; only same-shape or python-scalar operands
    def __add__(self, other):
        from dualprune import functional as F

        if isinstance(other, Tensor):
            return F.add(self, other)
        return F.add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        from dualprune import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from dualprune import functional as F

        return F.scale(self, -1.0)

    def __sub__(self, other):
        return self + (-other)

    def sum(self) -> Tensor:
        from dualprune import functional as F

        return F.sum(self)

    def mean(self) -> Tensor:
        from dualprune import functional as F

        return F.mean(self)


class Node:
    """One recorded op: the function instance plus its input tensors."""

    __slots__ = ("fn", "inputs")

    def __init__(self, fn: Function, inputs: Sequence[Tensor]):
        self.fn = fn
        self.inputs = tuple(inputs)


class Function:
    """Base class for differentiable ops.

    ``forward`` receives arrays and returns an array; it may stash whatever
    it needs on ``self``. ``backward`` receives the upstream gradient array and
    returns one gradient (or ``None``) per input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.__name__} produced non-finite values")
        track = _grad_enabled and any(fn.needs_grad)
        result = Tensor(out, requires_grad=track, dtype=out.dtype)
        if track:
            result.node = Node(fn, tensors)
        return result


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients are summed into existing ``.grad`` arrays, so call
    ``zero_grad`` between steps. Interior tensors do not keep gradients.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() without a seed gradient needs a scalar loss, got {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.fn.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{type(t.node.fn).__name__} returned grad of shape {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(input) for each input without touching ``.grad``.

    Inputs with no recorded path to ``loss`` get zero gradients.
    """
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    try:
        backward(loss)
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]
    finally:
        for t, g in zip(inputs, saved):
            t.grad = g

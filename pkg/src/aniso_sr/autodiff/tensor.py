"""Tensor container and reverse-mode graph traversal."""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GradientError(RuntimeError):
    """Misuse of the gradient machinery (non-scalar loss, missing grad, ...)."""


# per thread, so concurrent inference blocks cannot leave recording switched off
_MODE = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode) in this thread."""
    previous = grad_enabled()
    _MODE.enabled = False
    try:
        yield
    finally:
        _MODE.enabled = previous


def grad_enabled() -> bool:
    return getattr(_MODE, "enabled", True)


class Tensor:
    """An n-dimensional array with an optional gradient buffer.

    ``data`` is stored as a C-contiguous numpy array (row-major). The dtype
    defaults to float32; float64 is accepted so gradient checks can run the
    same graph in double precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op output and attach its backward closure when needed.

    ``backward_fn`` receives the upstream gradient and calls
    :func:`accumulate` on each parent that requires a gradient.
    """
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; parent order is fixed so traversal is deterministic.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``.

    Interior nodes receive gradients transiently; they are released once
    their contribution has been pushed to the parents.
    """
    if loss.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor requiring grad")
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        # free interior buffers; leaves (no backward fn) keep theirs
        node.grad = None
        node._parents = ()
        node._backward = None


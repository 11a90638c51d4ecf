"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations from :mod:`minimt.autodiff.ops`
record a computation graph; :func:`backward` walks it once in reverse
topological order and accumulates gradients into ``.grad`` of every
reachable tensor that has ``requires_grad`` set.

Gradients are recomputed from scratch on every :func:`backward` call, so
calling it twice on the same graph yields identical values rather than
silently accumulating.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Mapping

import numpy as np

from minimt.errors import ContractError

__all__ = ["Tensor", "backward", "gradients", "no_grad", "is_grad_enabled"]

_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the context (used for inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the actual rules live in ops.py.
    def __add__(self, other):
        from minimt.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from minimt.autodiff import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from minimt.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from minimt.autodiff import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from minimt.autodiff import ops

        return ops.matmul(self, other)


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create a graph node; records parents only while gradients are enabled."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child_index = stack.pop()
        if child_index == 0:
            if id(node) in visited:
                continue
            visited.add(id(node))
        if child_index < len(node._parents):
            stack.append((node, child_index + 1))
            parent = node._parents[child_index]
            if id(parent) not in visited:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar. Leaf gradients are assigned, not accumulated,
    so repeated calls on the same graph are idempotent.
    """
    if loss.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}"
        )
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        if node._backward is None:
            if node.requires_grad:
                g = grads.get(id(node))
                node.grad = g if g is not None else None
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = None
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def gradients(loss: Tensor, parameters: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run :func:`backward` and return a name -> gradient map.

    Parameters that do not participate in the graph get zero gradients of
    matching shape, so optimizers can treat the map as total.
    """
    for p in parameters.values():
        p.grad = None
    backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in parameters.items()
    }

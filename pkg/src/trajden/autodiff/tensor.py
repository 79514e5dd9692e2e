"""Define-by-run reverse-mode differentiation over dense numpy grids."""

from __future__ import annotations

import numpy as np

from ..geometry import DomainError

DEFAULT_DTYPE = np.float32


class Grid:
    """A dense array that records how it was computed.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` across
    backward passes until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise DomainError(f"grids have at most 4 dims, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Grid, ...] = ()
        self._backward = None
        self._done = False
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward) -> "Grid":
        """Register a result on the tape; ``backward(g)`` returns one gradient per parent (or None)."""
        out = cls(data, dtype=data.dtype)
        live = tuple(p for p in parents if p.needs_grad)
        if live:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def needs_grad(self) -> bool:
        return self.requires_grad or self._backward is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Grid{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Grid":
        return Grid(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar, routed through ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Grid):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def _topo_order(root: Grid) -> list[Grid]:
    order: list[Grid] = []
    seen: set[int] = set()
    stack: list[tuple[Grid, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    return order


def backward(loss: Grid) -> None:
    """Populate ``grad`` on every leaf with ``requires_grad`` reachable from ``loss``."""
    if loss.data.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise DomainError("backward already ran on this loss; build a new graph first")
    if not loss.needs_grad:
        loss._done = True
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.needs_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if pg.shape != p.data.shape:
                raise AssertionError(f"gradient shape {pg.shape} != {p.data.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    # release the graph so intermediates can be collected
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._done = True

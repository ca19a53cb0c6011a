"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every primitive in :mod:`distilsrl.ops`
returns a new tensor that remembers its parents and a closure mapping the
output gradient to parent gradients.  :func:`backward` walks that record in
reverse topological order exactly once; the graph is released afterwards so a
second pass over the same root is an error.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar root, re-entry)."""


def default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    _state["dtype"] = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph (frozen encoders, evaluation)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def grad_enabled() -> bool:
    return _state["grad_enabled"]


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.slice(self, idx)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; record parents only if some parent needs a gradient.

    ``backward_fn(g)`` must return one gradient array (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype, op=op)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        for p in parents:
            if p._released:
                raise GraphError(f"input to {op} belongs to a graph that was already back-propagated")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Graph:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(root: Tensor, inputs: Sequence[Tensor] = ()) -> Graph:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Tensors listed in ``inputs`` that the root does not depend on receive an
    explicit zero gradient instead of keeping ``grad = None``.
    """
    for t in inputs:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)
    if root._released:
        raise GraphError("backward already ran on this graph")
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return Graph([])
    graph = Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg.astype(p.data.dtype, copy=False)
        node._parents = ()
        node._backward = None
        node._released = True
    return graph

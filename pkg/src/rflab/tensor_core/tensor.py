"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a closure mapping the output gradient to
input gradients. :func:`backward` traces the recorded graph into a
:class:`Graph` (a topologically ordered node list) and walks it in reverse.

Training and sampling run in float32. ``precision(np.float64)`` switches the
dtype of newly created tensors, which the gradient-check harness uses as an
f64 shadow mode.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from rflab.errors import DimensionError, NonFiniteError, UsageError

_state = {"dtype": np.dtype(np.float32), "checked": False, "grad": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` whenever an op produces NaN or Inf."""
    prev = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled() -> bool:
    return _state["grad"]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float array, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        if _state["checked"]:
            _check_finite(self.data, "leaf")

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        if _state["checked"]:
            _check_finite(data, op)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Graph and backward
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    tensor: Tensor


class Graph:
    """Nodes of a computation in topological order.

    Built by :meth:`trace` from an output tensor. Every input id of a node is
    smaller than the node's own id.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._ids: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._ids

    def index(self, tensor: Tensor) -> int:
        return self._ids[id(tensor)]

    def _append(self, tensor: Tensor) -> None:
        inputs = tuple(self._ids[id(p)] for p in tensor._parents if p.requires_grad)
        self._ids[id(tensor)] = len(self.nodes)
        self.nodes.append(Node(tensor.op, inputs, tensor))

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        graph = cls()
        if not output.requires_grad:
            return graph
        visited: set[int] = set()
        # iterative post-order DFS; parents are visited in argument order
        stack: list[tuple[Tensor, int]] = [(output, 0)]
        visited.add(id(output))
        while stack:
            node, i = stack[-1]
            if i < len(node._parents):
                stack[-1] = (node, i + 1)
                parent = node._parents[i]
                if parent.requires_grad and id(parent) not in visited:
                    visited.add(id(parent))
                    stack.append((parent, 0))
            else:
                stack.pop()
                graph._append(node)
        return graph


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    if not loss.requires_grad:
        return graph
    if loss not in graph:
        raise UsageError("loss tensor is not part of the supplied graph")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: graph.index(loss) + 1]):
        t = node.tensor
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return graph


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), "add",
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), "sub",
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), "mul",
                           lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, (a, b), "div",
                           lambda g: (_unbroadcast(g / bd, ad.shape),
                                      _unbroadcast(-g * out / bd, bd.shape)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, (a, b), "matmul", grad_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._from_op(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes",
                           lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def grad_fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), "getitem", grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(out, tensors, "concat",
                           lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)

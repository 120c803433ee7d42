"""
Reverse-mode differentiable tensors.

Each op produces a new ``Tensor`` holding its parents and a closure mapping
the output gradient to one gradient per parent. ``backward`` walks the graph
once in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ArgumentError, ShapeError, StateError

_local = threading.local()


def _get(name, default):
    return getattr(_local, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def set_default_dtype(dtype) -> None:
    _local.dtype = np.dtype(dtype)


@contextlib.contextmanager
def verification_mode():
    """Run enclosed code in float64, for tight gradient checks."""
    prev = default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._released = False

    # -- basic properties ---------------------------------------------------

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._released = False
    if grad_enabled() and any(p.requires_grad for p in parents):
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
    return order


def backward(loss: Tensor, accumulate: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``.

    Leaves that already hold a gradient raise ``StateError`` unless
    ``accumulate`` is set, so stale gradients never leak across steps.
    """
    if loss.size != 1:
        raise ArgumentError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._released:
        raise StateError("graph was already backpropagated; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                continue
            if node.grad is not None and not accumulate:
                raise StateError(
                    f"gradient already populated on {node.name or node!r}; zero it before another backward"
                )
            node.grad = g.astype(node.dtype, copy=False) if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{node._op}: gradient shape {pg.shape} != input shape {p.shape}")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None
        node._released = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _operand(x, like: Tensor) -> tuple[np.ndarray, Tensor | None]:
    if isinstance(x, Tensor):
        return x.data, x
    arr = np.asarray(x, dtype=like.dtype)
    if arr.ndim and np.broadcast_shapes(arr.shape, like.shape) != like.shape:
        raise ShapeError(f"constant of shape {arr.shape} does not fit tensor shape {like.shape}")
    return arr, None


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(x, y) -> Tensor:
    if not isinstance(x, Tensor):
        x, y = y, x
    yd, yt = _operand(y, x)
    if yt is not None:
        _check_same(x, yt, "add")

    def bw(g):
        return (g, g if yt is not None else None)

    return make_node(x.data + yd, (x, yt) if yt is not None else (x,), bw, "add")


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def mul(x, y) -> Tensor:
    if not isinstance(x, Tensor):
        x, y = y, x
    yd, yt = _operand(y, x)
    if yt is not None:
        _check_same(x, yt, "mul")
    xd = x.data

    def bw(g):
        return (g * yd, g * xd if yt is not None else None)

    return make_node(xd * yd, (x, yt) if yt is not None else (x,), bw, "mul")


def div(x, y) -> Tensor:
    if isinstance(x, Tensor):
        xd = x.data
        yd, yt = _operand(y, x)
        if yt is not None:
            _check_same(x, yt, "div")
    else:
        yt = y
        xd, _ = _operand(x, y)
        yd = y.data
    out = xd / yd
    parents = tuple(t for t in (x, yt) if isinstance(t, Tensor))

    def bw(g):
        gx = g / yd
        grads = []
        if isinstance(x, Tensor):
            grads.append(gx)
        if isinstance(yt, Tensor):
            grads.append(-gx * out)
        return grads

    return make_node(out, parents, bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def flip(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if not axes:
        return x
    return make_node(np.flip(x.data, axes).copy(), (x,), lambda g: (np.flip(g, axes).copy(),), "flip")

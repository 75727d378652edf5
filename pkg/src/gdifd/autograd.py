"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation builds a :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to gradients for each
parent. :func:`backward` walks the graph once in reverse topological order and
accumulates gradients additively, so a tensor used twice receives the sum of
both contributions.

Broadcasting follows numpy's trailing-dimension alignment. Gradients flowing
into a broadcast operand are summed back to its original shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "topological_order",
    "no_grad",
    "is_grad_enabled",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "maximum",
    "minimum",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "softmax",
    "upsample_nearest",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
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
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- graph traversal -------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from a scalar root.

    Leaf gradients accumulate into any existing ``grad``; call ``zero_grad``
    between steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward called on a tensor that does not require grad")
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- finite differences ----------------------------------------------------
def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        with no_grad():
            out = f(Tensor(arr))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = evaluate(base)
        flat[i] = orig - step
        lo = evaluate(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), grad_fn, "div")


def maximum(a, c: float) -> Tensor:
    """``max(a, c)`` against a constant; gradient is 0 at the kink."""
    a = _as_tensor(a)
    mask = a.data > c

    def grad_fn(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, c).astype(a.dtype, copy=False), (a,), grad_fn, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)

    return _make(np.where(pick_a, a.data, b.data), (a, b), grad_fn, "minimum")


# -- elementwise unary -----------------------------------------------------
def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    ad = a.data

    def grad_fn(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad**p, (a,), grad_fn, "power")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape --------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), grad_fn, "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if isinstance(it, (slice, int, np.integer)) or it is None or it is Ellipsis:
            continue
        if isinstance(it, np.ndarray) and it.dtype == bool and len(items) == 1:
            continue
        return False
    return True


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), grad_fn, "getitem")


def softmax(a, axis: int = 1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def upsample_nearest(a, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes of an NCHW tensor."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ValueError(f"upsample_nearest expects NCHW, got shape {a.shape}")
    f = int(factor)
    out = a.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = a.shape

    def grad_fn(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out, (a,), grad_fn, "upsample")

"""Array-level reverse-mode differentiation.

Every operation on a :class:`Tensor` records its parents and a closure that maps
the output cotangent to parent cotangents. :func:`gradient` walks the recorded
graph in reverse topological order. Values are float64 numpy arrays.

Tensors built only from constants carry no closures, so the same code path is
used for no-grad evaluation at negligible overhead.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A non-finite value was met. ``name`` identifies the offending node."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "backward", "name", "op")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward: Callable | None = None
        self.name = name
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def named(self, name: str) -> "Tensor":
        self.name = name
        return self

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def variable(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True, name=name)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out.op = op
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def back(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def back(g):
        return (g * p * a.value ** (p - 1.0),)

    return _make(a.value**p, (a,), back, "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a, beta: float = 1.0) -> Tensor:
    """``log(1 + exp(beta * a)) / beta``; derivative ``sigmoid(beta * a)``."""
    a = as_tensor(a)
    z = beta * a.value
    e = np.exp(-np.abs(z))
    out = (np.maximum(z, 0.0) + np.log1p(e)) / beta
    slope = np.where(z >= 0, 1.0, e) / (1.0 + e)
    return _make(out, (a,), lambda g: (g * slope,), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clip")


def where(cond, a, b) -> Tensor:
    """Select with a constant boolean condition; gradients go to the chosen branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.where(cond, a.value, b.value), (a, b), back, "where")


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), back, "getitem")


def take_rows(a, index) -> Tensor:
    """Gather along axis 0 with a permutation-free integer index (faster than getitem)."""
    a = as_tensor(a)
    index = np.asarray(index)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), back, "take_rows")


def scatter_rows(a, index, n_rows: int) -> Tensor:
    """Place rows of ``a`` at unique positions ``index`` of a zero array with ``n_rows`` rows."""
    a = as_tensor(a)
    index = np.asarray(index)
    out = np.zeros((n_rows,) + a.shape[1:])
    out[index] = a.value
    return _make(out, (a,), lambda g: (g[index],), "scatter_rows")


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [as_tensor(t) for t in items]
    ax = axis if axis >= 0 else items[0].ndim + axis
    sizes = [t.shape[ax] for t in items]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.value for t in items], axis=ax), items, back, "concat")


def cumsum_exclusive(a, axis: int = -1) -> Tensor:
    """``out[i] = sum_{j<i} a[j]`` along ``axis``."""
    a = as_tensor(a)
    v = np.cumsum(a.value, axis=axis)
    out = np.zeros_like(v)
    sl_dst = [slice(None)] * v.ndim
    sl_src = [slice(None)] * v.ndim
    sl_dst[axis] = slice(1, None)
    sl_src[axis] = slice(None, -1)
    out[tuple(sl_dst)] = v[tuple(sl_src)]

    def back(g):
        # d out[i] / d a[j] = 1 for j < i  ->  grad a[j] = sum_{i>j} g[i]
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        ga = np.zeros_like(g)
        ga[tuple(sl_src)] = rev[tuple(sl_dst)]
        return (ga,)

    return _make(out, (a,), back, "cumsum_exclusive")


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul expects a 2-D right operand, got shape {b.shape}")

    def back(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k, n = b.shape
            gb = a.value.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(a.value @ b.value, (a, b), back, "matmul")


def norm(a, axis: int = -1) -> Tensor:
    return sqrt(tsum(square(a), axis=axis))


# ---------------------------------------------------------------- backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _first_nonfinite(order: Iterable[Tensor]) -> Tensor | None:
    for node in order:
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def backprop(loss: Tensor) -> dict[int, np.ndarray]:
    """Cotangents for every node reachable from ``loss``, keyed by ``id(node)``."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    order = _toposort(loss)
    if not np.isfinite(loss.value).all():
        bad = _first_nonfinite(order)
        name = None if bad is None else (bad.name or bad.op)
        raise NumericError(f"non-finite loss; first non-finite intermediate: {name}", name)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return grads


def gradient(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """d loss / d p for every named leaf; leaves off the compute path get exact zeros."""
    loss = as_tensor(loss)
    grads = backprop(loss) if loss.requires_grad else {}
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.value) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out


def _np_sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(z, dtype=np.float64))


np_sigmoid = _np_sigmoid

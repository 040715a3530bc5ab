"""Dense float64 tensors with a reverse-mode tape.

Every differentiable primitive records a :class:`TapeEntry` holding its
inputs and a closure that maps the output gradient to input gradients.
Entries carry a global sequence number; :func:`backward` replays the
entries reachable from the loss in strictly decreasing sequence order,
i.e. exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special


class InvalidShapeError(ValueError):
    """Operand geometry does not satisfy an operation's precondition."""


class NonFiniteError(ArithmeticError):
    """Raised in checked mode when an operation would produce inf/nan."""


class ContractError(RuntimeError):
    """A caller violated an API contract (e.g. backward on a non-scalar)."""


_seq = itertools.count()
_grad_enabled = True
_checked = False


@dataclass(eq=False)
class TapeEntry:
    seq: int
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_entry", "__weakref__")

    # numpy should defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._entry: TapeEntry | None = None

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return max_(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


# ---------------------------------------------------------------------------
# grad mode / checked mode


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def checked() -> Iterator[None]:
    """Raise :class:`NonFiniteError` on division by exact zero inside the block."""
    global _checked
    prev, _checked = _checked, True
    try:
        yield
    finally:
        _checked = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: tuple[Tensor, ...], back, name: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs)
    if needs:
        t._entry = TapeEntry(next(_seq), parents, back, name)
    return t


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._entry is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t._entry.parents:
            if p._entry is not None and id(p) not in nodes:
                stack.append(p)
    order = sorted(nodes.values(), key=lambda t: t._entry.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        entry = t._entry
        for p, pg in zip(entry.parents, entry.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._entry is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# binary elementwise


def _pair(a, b) -> tuple[Tensor, Tensor]:
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if _checked and np.any(bd == 0.0):
        raise NonFiniteError("division by exact zero")
    out = ad / bd

    def back(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), back, "div")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# unary elementwise


def neg(x) -> Tensor:
    return mul(x, -1.0)


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)  # subgradient 0 at 0
    return _record(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if _checked and np.any(x.data <= 0.0):
        raise NonFiniteError("log of non-positive value")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0.0, 1.0, slope)
    return _record(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.logaddexp(0.0, xd), (x,), lambda g: (g * special.expit(xd),), "softplus")


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is passed only where the input is inside."""
    x = as_tensor(x)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x.data >= lo_) & (x.data <= hi_)
    return _record(np.clip(x.data, lo_, hi_), (x,), lambda g: (g * inside,), "clamp")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(x) -> Tensor:
    """Standard normal CDF, 0.5 * erfc(-x / sqrt(2))."""
    x = as_tensor(x)
    xd = x.data
    out = 0.5 * special.erfc(-xd * _INV_SQRT2)
    return _record(out, (x,), lambda g: (g * _INV_SQRT2PI * np.exp(-0.5 * xd * xd),),
                   "normal_cdf")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def back(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _record(x.data.sum(axis=axes, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def max_(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties send the gradient to the first occurrence."""
    x = as_tensor(x)
    axis %= x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        g = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis)
        return (gx,)

    return _record(out if keepdims else out.squeeze(axis), (x,), back, "max")


def softmax_axis(x, axis: int) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        if _fancy(index):
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return _record(np.array(x.data[index]), (x,), back, "getitem")


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, back, "concat")


def pad2d(x, pads: tuple[int, int, int, int], value: float = 0.0) -> Tensor:
    """Constant-pad the last two axes by (top, bottom, left, right)."""
    x = as_tensor(x)
    t, b, l, r = pads
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    out = np.pad(x.data, widths, constant_values=value)
    h, w = x.shape[-2:]
    return _record(out, (x,), lambda g: (g[..., t:t + h, l:l + w],), "pad2d")

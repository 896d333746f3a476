"""Reverse-mode automatic differentiation over dense float64 arrays.

Each operation records its parents and a closure mapping the output adjoint to
one adjoint per parent. The tape is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

#: Counts numerically suspicious events (division by zero, log of zero,
#: skipped optimizer steps). Inspected by tests and training diagnostics.
diagnostics: Counter = Counter()

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def square(self) -> Tensor:
        return square(self)

    # -- backward --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate across calls; intermediate gradients are
        overwritten with this pass's values.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (loss must be scalar)", self.shape)
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.grad = g if node.grad is None else node.grad + g


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise ---------------------------------------------------------

def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    if np.any(bd == 0):
        diagnostics["div_by_zero"] += 1

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    if np.any(xd <= 0):
        diagnostics["log_nonpositive"] += 1

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / xd,)

    return _make(out, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


def softplus(x) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.maximum(xd, 0.0) + np.log1p(e)

    def backward(g):
        sig = np.where(xd >= 0, 1.0, e) / (1.0 + e)
        return (g * sig,)

    return _make(out, (x,), backward)


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); the gradient is zero where the floor is active."""
    x = as_tensor(x)
    keep = x.data > floor
    return _make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "tanh": tanh, "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of add, sub, mul, div, exp, log, tanh, square by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# -- reductions and shape ops --------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[i] for i in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is Ellipsis or i is None or isinstance(i, (slice, int, np.integer))
               for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    return _make(data, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


# -- fused ops -----------------------------------------------------------

def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean, True = keep) removes entries; every row
    must keep at least one entry.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbeta = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward)


def rotary(x, angles: np.ndarray) -> Tensor:
    """Rotate consecutive pairs (x[2j], x[2j+1]) of the last axis by ``angles[..., j]``.

    ``angles`` is a constant array broadcastable to ``x.shape[:-1] + (d/2,)``.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError("rotary (last extent must be even)", x.shape)
    cos, sin = np.cos(angles), np.sin(angles)

    def rot(v, s):
        pairs = v.reshape(v.shape[:-1] + (d // 2, 2))
        a, b = pairs[..., 0], pairs[..., 1]
        out = np.stack((a * cos - b * s, a * s + b * cos), axis=-1)
        return out.reshape(out.shape[:-2] + (d,))

    out = rot(x.data, sin)
    return _make(out, (x,), lambda g: (_unbroadcast(rot(g, -sin), x.shape),))


def tensors_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)

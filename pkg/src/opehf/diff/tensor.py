"""Reverse-mode differentiation over numpy arrays.

Every operation records its parents and a closure mapping the output gradient
to parent gradients. :func:`backward` walks the graph in reverse topological
order and accumulates ``.grad`` on every node that requires it.
"""
from __future__ import annotations

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=""):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.item())

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def parameter(value, name="") -> Tensor:
    return Tensor(np.array(value, dtype=float), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(value)
    return Tensor(value, parents, fn, True)


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / bv, av.shape), unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * av)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 1 or bv.ndim == 1:
        raise ValueError("matmul expects operands with at least two dimensions")

    def fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), fn)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), fn)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def fn(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), fn)


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.value for t in ts], axis=axis), tuple(ts), fn)


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.value for t in ts], axis=axis), tuple(ts), fn)


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Gradients accumulate across calls; reset them (``zero_grad``) before reusing
    a graph.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if not p.requires_grad or g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g


def zero_grads(root: Tensor) -> None:
    """Reset gradients on every node reachable from ``root``."""
    for node in _toposort(root):
        node.grad = None


def grad(root: Tensor, wrt) -> list:
    """Convenience: gradients of ``root`` with respect to the leaves ``wrt``."""
    for w in wrt:
        w.grad = None
    backward(root)
    return [np.zeros_like(w.value) if w.grad is None else w.grad for w in wrt]

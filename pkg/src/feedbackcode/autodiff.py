"""Small reverse-mode differentiation engine over numpy arrays.

``Var`` wraps an array and records how it was produced; ``backward`` walks
the recorded graph in reverse topological order.  The free functions
(``tanh``, ``sigmoid`` ...) accept plain arrays as well, so model code can be
written once and run either on floats (evaluation) or on ``Var`` (training).
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward", "const")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None, const=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.const = const

    def __repr__(self):
        return f"Var({self.value!r})"

    @property
    def shape(self):
        return self.value.shape

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(
            a.value + b.value,
            (a, b),
            lambda g: (_ub(g, a), _ub(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(
            a.value - b.value,
            (a, b),
            lambda g: (_ub(g, a), None if b.const else _ub(-g, b)),
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(
            a.value * b.value,
            (a, b),
            lambda g: (
                None if a.const else _ub(g * b.value, a),
                None if b.const else _ub(g * a.value, b),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self, other
        out = a.value / b.value
        return Var(
            out,
            (a, b),
            lambda g: (
                None if a.const else _ub(g / b.value, a),
                None if b.const else _ub(-g * out / b.value, b),
            ),
        )

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        a = self

        basic = isinstance(index, (int, slice)) or (
            isinstance(index, tuple) and all(isinstance(i, (int, slice)) or i is Ellipsis for i in index)
        )

        def back(g):
            full = np.zeros_like(a.value)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Var(a.value[index], (a,), back)

    # graph traversal ----------------------------------------------------
    def backward(self, seed=None):
        order = []
        seen = set()
        stack = [(self, False)]
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
                if not p.const and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent.const:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x, const=True)


def _ub(g, node):
    if node.const:
        return None
    return _unbroadcast(g, node.shape)


def value(x):
    return x.value if isinstance(x, Var) else x


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    out = np.tanh(x.value)
    return Var(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    if not isinstance(x, Var):
        return _sigmoid(np.asarray(x, dtype=np.float64))
    out = _sigmoid(x.value)
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return Var(out, (x,), lambda g: (g * 0.5 / out,))


def clip(x, lo, hi):
    if not isinstance(x, Var):
        return np.clip(x, lo, hi)
    inside = (x.value >= lo) & (x.value <= hi)
    return Var(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def mean(x):
    if not isinstance(x, Var):
        return np.mean(x)
    n = x.value.size
    return Var(np.mean(x.value), (x,), lambda g: (np.full(x.shape, g / n),))


def take(x, indices):
    """``x[indices]`` for a 1-d ``x`` and an integer index array."""
    if not isinstance(x, Var):
        return np.asarray(x)[indices]
    idx = np.asarray(indices)
    size = x.value.shape[0]

    def back(g):
        return (np.bincount(idx.ravel(), weights=np.asarray(g).ravel(), minlength=size),)

    return Var(x.value[idx], (x,), back)


def stack(items, axis=0):
    if not any(isinstance(v, Var) for v in items):
        return np.stack(items, axis=axis)
    items = [_lift(v) for v in items]
    out = np.stack([v.value for v in items], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return Var(out, tuple(items), back)


def matmul(a, b):
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry batch axes."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.matmul(a, b)
    a, b = _lift(a), _lift(b)
    if b.value.ndim != 2:
        raise ValueError("matmul expects a 2-d right operand")

    def back(g):
        ga = None if a.const else g @ b.value.T
        gb = None
        if not b.const:
            lhs = a.value.reshape(-1, a.value.shape[-1])
            gb = lhs.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Var(a.value @ b.value, (a, b), back)

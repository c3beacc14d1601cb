"""Minimal reverse-mode automatic differentiation.

A :class:`Tape` records every :class:`Var` created while it is active, in
creation order, so the reverse of that order is a valid topological order for
the backward sweep. Values may be Python floats or numpy arrays; broadcasting
follows numpy and gradients are reduced back to operand shapes.

Non-smooth primitives (``minimum``, ``min0``, ``relu``, ``interp``, the
straight-through rounding in :mod:`sizegrad.optimizer`) append the branch they
took to ``tape.branches``. Two evaluations with equal branch signatures lie in
the same smooth piece, which is what finite-difference checks rely on.

The generic helpers at the bottom (``relu``, ``vmax``, ``matmul``, ...) accept
plain floats/arrays as well as :class:`Var`, so the same timing code runs
both as golden arithmetic and on the tape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.branches: list[tuple] = []

    def var(self, value) -> "Var":
        """Create a leaf that requires gradient."""
        if isinstance(value, np.ndarray):
            value = value.astype(float, copy=True)
        else:
            value = float(value)
        return Var(self, value)

    def record(self, tag, choice) -> None:
        self.branches.append((tag, choice))

    def signature(self) -> tuple:
        return tuple(self.branches)

    def backward(self, out: "Var", seed=None) -> None:
        if out.tape is not self:
            raise ValueError("output does not belong to this tape")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value) if seed is None else seed
        if np.ndim(out.value) == 0 and seed is None:
            out.grad = 1.0
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                g = _unbroadcast(g, np.shape(parent.value))
                parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(g, shape):
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if len(shape) == 0:
        return float(g)
    return g


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


class Var:
    __slots__ = ("tape", "value", "grad", "_parents", "_backward")
    __array_priority__ = 1000.0

    def __init__(self, tape: Tape, value, parents: tuple = (), backward: Callable | None = None):
        self.tape = tape
        self.value = value
        self.grad = None
        self._parents = parents
        self._backward = backward
        tape.nodes.append(self)

    def __repr__(self):
        return f"Var({self.value!r})"

    @property
    def shape(self):
        return np.shape(self.value)

    def __len__(self):
        return len(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return Var(self.tape, self.value + _val(other), (self, other), lambda g: (g, g))

    def __radd__(self, other):
        return Var(self.tape, _val(other) + self.value, (other, self), lambda g: (g, g))

    def __sub__(self, other):
        return Var(self.tape, self.value - _val(other), (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return Var(self.tape, _val(other) - self.value, (other, self), lambda g: (g, -g))

    def __neg__(self):
        return Var(self.tape, -self.value, (self,), lambda g: (-g,))

    def __mul__(self, other):
        a, b = self.value, _val(other)
        return Var(self.tape, a * b, (self, other), lambda g: (g * b, g * a))

    def __rmul__(self, other):
        a, b = _val(other), self.value
        return Var(self.tape, a * b, (other, self), lambda g: (g * b, g * a))

    def __truediv__(self, other):
        a, b = self.value, _val(other)
        return Var(self.tape, a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        a, b = _val(other), self.value
        return Var(self.tape, a / b, (other, self), lambda g: (g / b, -g * a / (b * b)))

    def __pow__(self, k):
        if isinstance(k, Var):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return Var(self.tape, a ** k, (self,), lambda g: (g * k * a ** (k - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        shape = np.shape(self.value)

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Var(self.tape, self.value[idx], (self,), back)

    # comparisons act on values only
    def __lt__(self, other):
        return self.value < _val(other)

    def __le__(self, other):
        return self.value <= _val(other)

    def __gt__(self, other):
        return self.value > _val(other)

    def __ge__(self, other):
        return self.value >= _val(other)

    def __float__(self):
        return float(self.value)

    # reductions / reshaping ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = np.shape(self.value)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Var(self.tape, np.sum(self.value, axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = np.size(self.value) if axis is None else np.shape(self.value)[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = np.shape(self.value)
        return Var(self.tape, np.reshape(self.value, shape if len(shape) > 1 else shape[0]), (self,),
                   lambda g: (np.reshape(g, old),))

    def swapaxes(self, a, b):
        return Var(self.tape, np.swapaxes(self.value, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))


# ---------------------------------------------------------------------------
# primitives on Var (with plain-value fallbacks)


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    y = np.exp(x.value)
    return Var(x.tape, y, (x,), lambda g: (g * y,))


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    a = x.value
    return Var(x.tape, np.log(a), (x,), lambda g: (g / a,))


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    a = _val(x)
    y = np.logaddexp(0.0, a)
    if not isinstance(x, Var):
        return y
    return Var(x.tape, y, (x,), lambda g: (g * _sigmoid(a),))


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    y = np.tanh(x.value)
    return Var(x.tape, y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    if not isinstance(x, Var):
        if np.ndim(x) == 0:
            return x if x > 0 else 0.0
        return np.maximum(x, 0.0)
    a = x.value
    if np.ndim(a) == 0:
        x.tape.record("relu", a > 0)
        if a > 0:
            return Var(x.tape, a, (x,), lambda g: (g,))
        return Var(x.tape, 0.0, (x,), lambda g: (0.0,))
    mask = a > 0
    x.tape.record("relu", mask.tobytes())
    return Var(x.tape, np.where(mask, a, 0.0), (x,), lambda g: (g * mask,))


def min0(x):
    """min(0, x); exact value, subgradient 1 on the negative side."""
    if not isinstance(x, Var):
        if np.ndim(x) == 0:
            return x if x < 0 else 0.0
        return np.minimum(x, 0.0)
    a = x.value
    if np.ndim(a) == 0:
        x.tape.record("min0", a < 0)
        if a < 0:
            return Var(x.tape, a, (x,), lambda g: (g,))
        return Var(x.tape, 0.0, (x,), lambda g: (0.0,))
    mask = a < 0
    x.tape.record("min0", mask.tobytes())
    return Var(x.tape, np.where(mask, a, 0.0), (x,), lambda g: (g * mask,))


def vmax(a, b):
    """Elementwise max; for scalars picks ``a`` on ties, like ``max``."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        if np.ndim(a) == 0 and np.ndim(b) == 0:
            return a if a >= b else b
        return np.maximum(a, b)
    va, vb = _val(a), _val(b)
    tape = _tape_of(a, b)
    if np.ndim(va) == 0 and np.ndim(vb) == 0:
        pick_a = va >= vb
        tape.record("max", pick_a)
        chosen = a if pick_a else b
        if isinstance(chosen, Var):
            return Var(tape, chosen.value, (chosen,), lambda g: (g,))
        return chosen
    mask = va >= vb
    return Var(tape, np.where(mask, va, vb), (a, b), lambda g: (g * mask, g * ~mask))


def minimum(xs: Sequence):
    """Exact minimum of a sequence of scalars; gradient flows to the first argmin."""
    best = 0
    for i in range(1, len(xs)):
        if _val(xs[i]) < _val(xs[best]):
            best = i
    tape = _tape_of(*xs)
    if tape is None:
        return xs[best]
    tape.record("min", best)
    chosen = xs[best]
    if isinstance(chosen, Var):
        return Var(tape, chosen.value, (chosen,), lambda g: (g,))
    return chosen


def logsumexp(x, axis=None):
    """Numerically stable log(sum(exp(x)))."""
    a = np.asarray(_val(x), dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = np.log(s) + m
    out = float(y.reshape(())) if axis is None else np.squeeze(y, axis=axis)
    if not isinstance(x, Var):
        return out
    w = e / s

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return Var(x.tape, out, (x,), back)


def softmax(x, axis=-1):
    return exp(_sub_lse(x, axis))


def _sub_lse(x, axis):
    lse = logsumexp(x, axis=axis)
    return x - expand_dims(lse, axis)


def expand_dims(x, axis):
    if not isinstance(x, Var):
        return np.expand_dims(x, axis)
    old = np.shape(x.value)
    return Var(x.tape, np.expand_dims(x.value, axis), (x,), lambda g: (np.reshape(g, old),))


def matmul(a, b):
    va, vb = _val(a), _val(b)
    y = np.matmul(va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return y

    def back(g):
        ga = gb = None
        if isinstance(a, Var):
            if np.ndim(vb) == 1:
                ga = np.multiply.outer(g, vb)
            else:
                ga = np.matmul(g, np.swapaxes(vb, -1, -2))
        if isinstance(b, Var):
            if np.ndim(va) == 1:
                gb = np.multiply.outer(va, g)
            elif np.ndim(vb) == 1:
                gb = np.einsum("...i,...->...i", va, g).reshape(-1, va.shape[-1]).sum(axis=0)
            else:
                gb = np.matmul(np.swapaxes(va, -1, -2), g)
        return ga, gb

    return Var(tape, y, (a, b), back)


def concat(xs: Sequence, axis=-1):
    vals = [_val(x) for x in xs]
    y = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return y
    sizes = [np.shape(v)[axis] for v in vals]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Var(tape, y, tuple(xs), back)


def stack(xs: Sequence, axis=0):
    return concat([expand_dims(x, axis) for x in xs], axis=axis)


def take(x, indices, axis=0):
    """Gather along ``axis`` with an integer index array."""
    if not isinstance(x, Var):
        return np.take(x, indices, axis=axis)
    shape = np.shape(x.value)

    def back(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        k = np.ndim(indices)
        np.add.at(moved, indices, np.moveaxis(g, list(range(axis, axis + k)), list(range(k))))
        return (out,)

    return Var(x.tape, np.take(x.value, indices, axis=axis), (x,), back)


def interp(table, g):
    """Piecewise-linear interpolation of ``table`` at continuous index ``g``.

    At an exact knot the value is the table entry itself (so integer sizes
    reproduce the discrete library bit-for-bit) and the derivative is the mean
    of the two adjacent segment slopes (one-sided at the ends).
    """
    n = len(table)
    a = float(_val(g))
    if n == 1:
        if isinstance(g, Var):
            g.tape.record("interp", 0)
            return Var(g.tape, float(table[0]), (g,), lambda gr: (0.0,))
        return float(table[0])
    if a == int(a) and 0 <= a <= n - 1:
        k = int(a)
        value = float(table[k])
        if k == 0:
            slope = table[1] - table[0]
        elif k == n - 1:
            slope = table[-1] - table[-2]
        else:
            slope = 0.5 * (table[k + 1] - table[k - 1])
        seg = ("knot", k)
    else:
        k = min(max(int(np.floor(a)), 0), n - 2)
        slope = table[k + 1] - table[k]
        value = table[k] + slope * (a - k)
        seg = ("seg", k)
    if not isinstance(g, Var):
        return value
    g.tape.record("interp", seg)
    slope = float(slope)
    return Var(g.tape, float(value), (g,), lambda gr: (gr * slope,))


def value(x):
    return _val(x)


def reshape(x, shape):
    if isinstance(x, Var):
        return x.reshape(shape)
    return np.reshape(x, shape)


def swapaxes(x, a, b):
    if isinstance(x, Var):
        return x.swapaxes(a, b)
    return np.swapaxes(x, a, b)

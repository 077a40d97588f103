"""Minimal reverse-mode differentiation over 2-D numpy values.

Every value on the tape is a 2-D array; scalars are ``(1, 1)``. Binary
elementwise ops accept equal shapes, or a ``(1, n)`` row vector (or a
``(1, 1)`` scalar) against an ``(m, n)`` matrix.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)), name="w")
    loss = (x @ w).square().sum()
    grads = backward(tape, loss)        # {"w": ndarray}
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .numerics import ShapeError

VjpFn = Callable[[np.ndarray], tuple]


class Node:
    __slots__ = ("kind", "inputs", "value", "grad", "vjp", "name", "trainable")

    def __init__(self, kind, inputs, value, vjp=None, name=None, trainable=False):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.vjp = vjp
        self.grad = None
        self.name = name
        self.trainable = trainable


class Tape:
    """Ordered node list; nodes are appended only after their inputs."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None, trainable: bool = True) -> Var:
        value = _as2d(value)
        return self._push(Node("leaf", (), value, name=name, trainable=trainable))

    def const(self, value) -> Var:
        return self._push(Node("const", (), _as2d(value)))

    def op(self, kind: str, inputs: tuple[Var, ...], value: np.ndarray, vjp: VjpFn) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{kind}: operand belongs to a different tape")
        return self._push(Node(kind, tuple(v.index for v in inputs), value, vjp=vjp))

    def backward(self, loss: Var) -> None:
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
        for node in self.nodes:
            node.grad = None
        self.nodes[loss.index].grad = np.ones((1, 1))
        for i in range(loss.index, -1, -1):
            node = self.nodes[i]
            if node.grad is None or node.vjp is None:
                continue
            for j, g in zip(node.inputs, node.vjp(node.grad)):
                if g is None:
                    continue
                parent = self.nodes[j]
                parent.grad = g if parent.grad is None else parent.grad + g


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Run the reverse sweep and return gradients of all named trainable leaves.

    Leaves the loss does not depend on receive zeros of their own shape.
    """
    tape.backward(loss)
    out = {}
    for i, node in enumerate(tape.nodes):
        if node.kind == "leaf" and node.trainable:
            key = node.name if node.name is not None else f"leaf{i}"
            out[key] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def _as2d(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"tape values must be at most 2-D, got shape {a.shape}")
    return a


def _broadcast_shape(kind: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if b[0] == 1 and (b[1] == a[1] or b[1] == 1):
        return a
    if a[0] == 1 and (a[1] == b[1] or a[1] == 1):
        return b
    raise ShapeError(f"{kind}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


class Var:
    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self) -> tuple[int, int]:
        return self.node.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.node.grad

    def _lift(self, other) -> Var:
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    @property
    def T(self) -> Var:
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)

    def __repr__(self) -> str:
        return f"Var({self.node.kind}#{self.index}, shape={self.shape})"


# --------------------------------------------------------------------------
# primitives


def add(a: Var, b: Var) -> Var:
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape.op("add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b: Var) -> Var:
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return a.tape.op("sub", (a, b), a.value - b.value, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Var, b: Var) -> Var:
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.op(
        "mul", (a, b), av * bv, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def scale(a: Var, c: float) -> Var:
    return a.tape.op("scale", (a,), c * a.value, lambda g: (c * g,))


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    av, bv = a.value, b.value
    return a.tape.op("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return a.tape.op("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return a.tape.op("exp", (a,), y, lambda g: (g * y,))


def log(a: Var) -> Var:
    x = a.value
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return a.tape.op("log", (a,), np.log(x), lambda g: (g / x,))


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.op("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def sqrt(a: Var) -> Var:
    x = a.value
    if np.any(x < 0):
        raise ValueError("sqrt: negative input")
    y = np.sqrt(x)
    return a.tape.op("sqrt", (a,), y, lambda g: (g * 0.5 / y,))


def square(a: Var) -> Var:
    x = a.value
    return a.tape.op("square", (a,), x * x, lambda g: (2.0 * g * x,))


def relu(a: Var) -> Var:
    x = a.value
    on = x > 0
    return a.tape.op("relu", (a,), np.where(on, x, 0.0), lambda g: (g * on,))


def clamp(a: Var, lo: float, hi: float) -> Var:
    """Clip to ``[lo, hi]``; gradient passes inside the closed interval, zero outside."""
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return a.tape.op("clamp", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape.op("sum", (a,), a.value.sum().reshape(1, 1), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Var) -> Var:
    shape = a.shape
    n = a.value.size
    return a.tape.op("mean", (a,), a.value.mean().reshape(1, 1), lambda g: (np.full(shape, g[0, 0] / n),))


def row_softmax(a: Var) -> Var:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return a.tape.op("row_softmax", (a,), y, vjp)


def cross_entropy(logits: Var, labels) -> Var:
    """Mean over rows of ``-log softmax(logits)[row, label]``."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels outside [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    value = -logp[rows, labels].mean().reshape(1, 1)
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (g[0, 0] * d / n,)

    return logits.tape.op("cross_entropy", (logits,), value, vjp)

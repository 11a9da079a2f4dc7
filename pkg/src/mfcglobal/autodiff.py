"""Reverse-mode automatic differentiation on an append-only tape.

Every elementary operation appends one node to a :class:`Tape`.  A node keeps
its kind, the indices of its operands and one vector-Jacobian closure per
operand.  Node values are float64 numpy arrays; a scalar is a 0-d array, so the
same machinery serves scalar expressions and the batched particle rollouts.

All functions in this module are polymorphic: called with plain numbers or
arrays they evaluate with numpy and record nothing, called with at least one
:class:`Var` they record onto that variable's tape.  Model code (drift and
cost callbacks, networks) is written once against these functions.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, GraphError, NumericError

__all__ = [
    "Tape", "Var", "Evaluation", "forward_eval", "backward_grad", "grad",
    "add", "sub", "mul", "div", "neg", "power", "square", "sqrt", "exp", "log",
    "tanh", "sigmoid", "relu", "clip", "sum", "mean", "matmul", "transpose",
    "reshape", "broadcast_to", "concatenate", "getitem", "value_of", "is_var",
]


class _Node:
    __slots__ = ("kind", "parents", "vjps")

    def __init__(self, kind, parents, vjps):
        self.kind = kind
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Append-only computation graph.

    Nodes are stored in creation order, which is a topological order because an
    operation can only consume variables that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> "Var":
        """Register an input (leaf) variable."""
        value = np.array(value, dtype=np.float64)
        return self._push("input", value, ())

    def count(self, kind: str) -> int:
        return len([node for node in self.nodes if node.kind == kind])

    def _push(self, kind, value, pairs):
        parents = []
        vjps = []
        for operand, vjp in pairs:
            if isinstance(operand, Var):
                parents.append(operand.index)
                vjps.append(vjp)
        self.nodes.append(_Node(kind, tuple(parents), tuple(vjps)))
        return Var(self, len(self.nodes) - 1, value)


class Var:
    """Handle to one node of a tape together with its forward value."""

    __slots__ = ("tape", "index", "_value")
    # make ndarray (op) Var dispatch to the reflected Var method
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self._value = value

    @property
    def value(self) -> np.ndarray:
        v = self._value
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite value at tape node {self.index}")
        return v

    @property
    def shape(self):
        return self._value.shape

    @property
    def ndim(self):
        return self._value.ndim

    @property
    def size(self):
        return self._value.size

    @property
    def T(self):
        return transpose(self)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(index={self.index}, value={self._value!r})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    """Forward value of a Var, or the argument itself as a float array."""
    if isinstance(x, Var):
        return x._value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*operands):
    tape = None
    for op in operands:
        if isinstance(op, Var):
            if tape is None:
                tape = op.tape
            elif op.tape is not tape:
                raise GraphError("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if tape is None:
        return out
    return tape._push("add", out, (
        (a, lambda g: _unbroadcast(g, va.shape)),
        (b, lambda g: _unbroadcast(g, vb.shape)),
    ))


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if tape is None:
        return out
    return tape._push("sub", out, (
        (a, lambda g: _unbroadcast(g, va.shape)),
        (b, lambda g: _unbroadcast(-g, vb.shape)),
    ))


def mul(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if tape is None:
        return out
    return tape._push("mul", out, (
        (a, lambda g: _unbroadcast(g * vb, va.shape)),
        (b, lambda g: _unbroadcast(g * va, vb.shape)),
    ))


def div(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    if np.any(vb == 0):
        raise DomainError("division by zero")
    out = va / vb
    if tape is None:
        return out
    return tape._push("div", out, (
        (a, lambda g: _unbroadcast(g / vb, va.shape)),
        (b, lambda g: _unbroadcast(-g * out / vb, vb.shape)),
    ))


def neg(a):
    tape = _tape_of(a)
    out = -value_of(a)
    if tape is None:
        return out
    return tape._push("neg", out, ((a, lambda g: -g),))


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    if isinstance(exponent, Var):
        raise GraphError("power supports constant exponents only")
    p = float(exponent)
    va = value_of(a)
    if not p.is_integer() and np.any(va < 0):
        raise DomainError("non-integer power of a negative value")
    if p < 0 and np.any(va == 0):
        raise DomainError("negative power of zero")
    out = va ** p
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._push("power", out, ((a, lambda g: g * p * va ** (p - 1.0)),))


def square(a):
    tape = _tape_of(a)
    va = value_of(a)
    out = va * va
    if tape is None:
        return out
    return tape._push("mul", out, ((a, lambda g: 2.0 * g * va),))


def sqrt(a):
    va = value_of(a)
    if np.any(va < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._push("sqrt", out, ((a, lambda g: 0.5 * g / out),))


def exp(a):
    tape = _tape_of(a)
    out = np.exp(value_of(a))
    if tape is None:
        return out
    return tape._push("exp", out, ((a, lambda g: g * out),))


def log(a):
    va = value_of(a)
    if np.any(va <= 0):
        raise DomainError("log of a non-positive value")
    out = np.log(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._push("log", out, ((a, lambda g: g / va),))


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(value_of(a))
    if tape is None:
        return out
    return tape._push("tanh", out, ((a, lambda g: g * (1.0 - out * out)),))


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    tape = _tape_of(a)
    out = _stable_sigmoid(value_of(a))
    if tape is None:
        return out
    return tape._push("sigmoid", out, ((a, lambda g: g * out * (1.0 - out)),))


def relu(a):
    tape = _tape_of(a)
    va = value_of(a)
    out = np.maximum(va, 0.0)
    if tape is None:
        return out
    return tape._push("relu", out, ((a, lambda g: g * (va > 0)),))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient vanishes outside the interval."""
    tape = _tape_of(a)
    va = value_of(a)
    out = np.clip(va, lo, hi)
    if tape is None:
        return out
    inside = (va >= lo) & (va <= hi)
    return tape._push("clip", out, ((a, lambda g: g * inside),))


# -- reductions and structure -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    tape = _tape_of(a)
    va = value_of(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)
    if tape is None:
        return out
    axes = _norm_axes(axis, va.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, va.shape)

    return tape._push("sum", out, ((a, vjp),))


def mean(a, axis=None, keepdims=False):
    va = value_of(a)
    count = 1
    for ax in _norm_axes(axis, va.ndim):
        count *= va.shape[ax]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise GraphError("matmul operands must be at least 2-d")
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._push("matmul", out, (
        (a, lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)),
    ))


def transpose(a, axes=None):
    va = value_of(a)
    out = np.transpose(va, axes)
    tape = _tape_of(a)
    if tape is None:
        return out
    inverse = None if axes is None else np.argsort(axes)
    return tape._push("transpose", out, ((a, lambda g: np.transpose(g, inverse)),))


def reshape(a, shape):
    va = value_of(a)
    out = va.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._push("reshape", out, ((a, lambda g: g.reshape(va.shape)),))


def broadcast_to(a, shape):
    va = value_of(a)
    out = np.broadcast_to(va, shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._push("broadcast", out, ((a, lambda g: _unbroadcast(g, va.shape)),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx):
    va = value_of(a)
    out = va[idx]
    tape = _tape_of(a)
    if tape is None:
        return out
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros(va.shape)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return z

    return tape._push("getitem", out, ((a, vjp),))


def concatenate(parts: Sequence, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def make(k):
        def vjp(g):
            return np.split(g, bounds, axis=ax)[k]
        return vjp

    return tape._push("concat", out, tuple((p, make(k)) for k, p in enumerate(parts)))


# -- evaluation and reverse sweep ---------------------------------------------

class Evaluation(NamedTuple):
    output: Var
    tape: Tape
    inputs: list


def forward_eval(fn: Callable, inputs: Sequence) -> Evaluation:
    """Evaluate ``fn`` on fresh tape inputs, recording every elementary op."""
    tape = Tape()
    leaves = [tape.var(x) for x in inputs]
    out = fn(*leaves)
    if not isinstance(out, Var):
        # constant expression: still hand back a tape variable
        out = tape.var(out)
    return Evaluation(out, tape, leaves)


def backward_grad(tape: Tape, output: Var, wrt: Sequence[Var], seed=None) -> list:
    """Reverse sweep from ``output`` to the variables in ``wrt``.

    For a non-scalar ``output`` the sweep starts from ``seed`` (default all
    ones), i.e. it returns the gradient of ``sum(seed * output)``.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise GraphError("output is not on this tape")
    for w in wrt:
        if not isinstance(w, Var) or w.tape is not tape:
            raise GraphError("wrt variable is not on the same tape as output")
    wanted = {}
    for pos, w in enumerate(wrt):
        wanted.setdefault(w.index, []).append(pos)
    result = [np.zeros(w.shape) for w in wrt]
    if seed is None:
        seed = np.ones(output.shape)
    adjoint = {output.index: np.asarray(seed, dtype=np.float64)}
    lowest = min(wanted) if wanted else output.index
    nodes = tape.nodes
    for i in range(output.index, lowest - 1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        if i in wanted:
            for pos in wanted[i]:
                result[pos] = np.array(g, dtype=np.float64).reshape(wrt[pos].shape)
        node = nodes[i]
        for parent, vjp in zip(node.parents, node.vjps):
            gp = vjp(g)
            prev = adjoint.get(parent)
            adjoint[parent] = gp if prev is None else prev + gp
    return result


def grad(fn: Callable, inputs: Sequence):
    """Value and gradient of a scalar function of several inputs."""
    ev = forward_eval(fn, inputs)
    grads = backward_grad(ev.tape, ev.output, ev.inputs)
    return float(ev.output.value), grads

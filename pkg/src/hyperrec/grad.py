"""Reverse-mode differentiation over ndarray programs recorded on a flat tape.

The tape holds one node per recorded operation, in execution order, with the
forward value computed eagerly.  ``backward`` walks the tape once in reverse
from a scalar root and accumulates vector-Jacobian products; named leaves
come back as a :class:`GradientMap` keyed by leaf name, with zeros for
leaves the root never touched.

Operations accept either :class:`Var` handles or raw arrays/floats; raw
operands are treated as constants and receive no gradient.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import ContractViolationError, NumericError

#: Gradients per named parameter tensor, shapes matching the parameters.
GradientMap = dict[str, np.ndarray]


class Node:
    __slots__ = ("kind", "value", "parents", "pulls", "name")

    def __init__(self, kind, value, parents, pulls, name=None):
        self.kind = kind
        self.value = value
        self.parents = parents  # tape indices of differentiable inputs
        self.pulls = pulls  # callables mapping upstream grad -> parent grad
        self.name = name  # set on named leaves only


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

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


class Tape:
    """Append-only, topologically ordered record of an ndarray program."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: Optional[str] = None) -> Var:
        """Register an input array; give it a name to receive gradients."""
        return self.record("leaf", np.asarray(value, dtype=np.float64), (), (), name)

    def record(self, kind, value, parents, pulls, name=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by op '{kind}'")
        self.nodes.append(Node(kind, value, parents, pulls, name))
        return Var(self, len(self.nodes) - 1)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(kind, a, b, fwd, pull_a: Callable, pull_b: Callable):
    va, vb = value_of(a), value_of(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return fwd(va, vb)  # constant fold
    tape = a.tape if isinstance(a, Var) else b.tape
    parents, pulls = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        pulls.append(lambda g: _unbroadcast(pull_a(g, va, vb), va.shape))
    if isinstance(b, Var):
        parents.append(b.index)
        pulls.append(lambda g: _unbroadcast(pull_b(g, va, vb), vb.shape))
    return tape.record(kind, fwd(va, vb), tuple(parents), tuple(pulls))


def _unary(kind, a, value, pull: Callable):
    if not isinstance(a, Var):
        return value  # constant fold
    return a.tape.record(kind, value, (a.index,), (pull,))


# --- arithmetic ---------------------------------------------------------


def add(a, b) -> Var:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Var:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Var:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Var:
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(a):
    return _unary("neg", a, -value_of(a), lambda g: -g)


def square(a):
    va = value_of(a)
    return _unary("square", a, va * va, lambda g: g * (2.0 * va))


def matmul(a, b) -> Var:
    return _binary(
        "matmul",
        a,
        b,
        lambda x, y: x @ y,
        lambda g, x, y: g @ y.T,
        lambda g, x, y: x.T @ g,
    )


# --- shape ops ----------------------------------------------------------


def reshape(a, shape):
    va = value_of(a)
    old = va.shape
    return _unary("reshape", a, va.reshape(shape), lambda g: g.reshape(old))


def transpose(a):
    return _unary("transpose", a, value_of(a).T, lambda g: g.T)


def gather(table: Var, indices) -> Var:
    """Row lookup table[indices]; the pull scatter-adds back into the table."""
    idx = np.asarray(indices)
    vt = table.value
    out = vt[idx]
    rows, row_size = vt.shape[0], int(np.prod(vt.shape[1:], dtype=np.int64))
    flat_idx = idx.ravel()
    offs = np.arange(row_size, dtype=np.int64)

    def pull(g):
        flat = (flat_idx[:, None] * row_size + offs[None, :]).ravel()
        acc = np.bincount(flat, weights=g.reshape(-1), minlength=rows * row_size)
        return acc.reshape(vt.shape)

    return _unary("gather", table, out, pull)


def reduce_sum(a, axis=None, keepdims: bool = False):
    va = value_of(a)
    out = va.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape)

    return _unary("sum", a, out, pull)


def dot(a, b, keepdims: bool = False) -> Var:
    """Inner product along the last axis."""
    return reduce_sum(mul(a, b), axis=-1, keepdims=keepdims)


def norm(a, keepdims: bool = False):
    """L2 norm along the last axis; zero vectors get zero gradient."""
    va = value_of(a)
    n = np.linalg.norm(va, axis=-1, keepdims=True)
    unit = va / np.where(n > 0.0, n, 1.0)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, -1)
        return g * unit

    return _unary("norm", a, n if keepdims else n[..., 0], pull)


# --- elementwise nonlinearities -----------------------------------------


def tanh(a):
    out = np.tanh(value_of(a))
    return _unary("tanh", a, out, lambda g: g * (1.0 - out * out))


def atanh(a):
    va = value_of(a)
    return _unary("atanh", a, np.arctanh(va), lambda g: g / (1.0 - va * va))


def exp(a):
    out = np.exp(value_of(a))
    return _unary("exp", a, out, lambda g: g * out)


def log(a):
    va = value_of(a)
    return _unary("log", a, np.log(va), lambda g: g / va)


def relu(a):
    va = value_of(a)
    gate = (va > 0.0).astype(np.float64)
    return _unary("relu", a, va * gate, lambda g: g * gate)


def absolute(a):
    va = value_of(a)
    sign = np.sign(va)
    return _unary("abs", a, np.abs(va), lambda g: g * sign)


def maximum(a, floor):
    """Elementwise max against a constant; gradient 0 at and below the floor."""
    va = value_of(a)
    gate = (va > floor).astype(np.float64)
    return _unary("max_const", a, np.maximum(va, floor), lambda g: g * gate)


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero at the bounds and outside them."""
    va = value_of(a)
    gate = ((va > lo) & (va < hi)).astype(np.float64)
    return _unary("clip", a, np.clip(va, lo, hi), lambda g: g * gate)


# --- backward pass ------------------------------------------------------


def backward(tape: Tape, root: Var) -> GradientMap:
    """Accumulate gradients of the scalar ``root`` over the whole tape.

    Returns gradients for every named leaf; leaves that do not influence
    the root come back as zeros of the leaf shape.
    """
    if root.tape is not tape:
        raise ContractViolationError("root was recorded on a different tape")
    if np.shape(root.value) != ():
        raise ContractViolationError(
            f"backward root must be scalar, got shape {np.shape(root.value)}"
        )
    grads: dict[int, np.ndarray] = {root.index: np.asarray(1.0)}
    for i in range(root.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        for parent, pull in zip(node.parents, node.pulls):
            contribution = pull(g)
            prev = grads.get(parent)
            grads[parent] = contribution if prev is None else prev + contribution
        if node.name is not None:
            grads[i] = g  # keep for collection below
    out: GradientMap = {}
    for i, node in enumerate(tape.nodes):
        if node.name is not None:
            g = grads.get(i)
            out[node.name] = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64)
    return out


def finite_diff_check(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Worst-case relative disagreement between backward() and central differences.

    ``loss_fn(tape, vars)`` must build and return the scalar loss Var from the
    named leaves in ``vars``; it must be deterministic.  The relative error
    denominator is the larger gradient magnitude with an absolute floor 1e-8.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def eval_value(arrays) -> float:
        tape = Tape()
        vars_ = {k: tape.leaf(v, name=k) for k, v in arrays.items()}
        return float(loss_fn(tape, vars_).value)

    tape = Tape()
    vars_ = {k: tape.leaf(v, name=k) for k, v in params.items()}
    root = loss_fn(tape, vars_)
    analytic = backward(tape, root)

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            work = {k: (v.copy() if k == name else v) for k, v in params.items()}
            wf = work[name].reshape(-1)
            wf[j] = orig + h
            up = eval_value(work)
            wf[j] = orig - h
            down = eval_value(work)
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(grad_flat[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad_flat[j] - numeric) / denom)
    return worst

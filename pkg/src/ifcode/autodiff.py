"""Reverse-mode automatic differentiation on a dynamic tape.

Every primitive accepts ``Var`` or plain array arguments. When none of the
arguments is a ``Var`` the primitive just returns the numpy result, so the
same model code runs with or without gradient tracking.

    tape = Tape()
    w = tape.var(np.array([1.0, 2.0]))
    loss = dot(w, w)
    grads = backward(tape, loss)      # {w.id: array([2., 4.])}
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonScalarOutput(ValueError):
    pass


@dataclass
class Node:
    primitive: str
    parents: tuple
    value: np.ndarray
    backward: Callable | None  # g -> tuple of parent gradients (None = no flow)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value) -> "Var":
        """Register a leaf."""
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), value, None))
        return Var(self, len(self.nodes) - 1, value)

    def record(self, primitive, value, parents, backward) -> "Var":
        ids = tuple(p.id for p in parents)
        self.nodes.append(Node(primitive, ids, value, backward))
        return Var(self, len(self.nodes) - 1, value)

    def leaves(self):
        return [i for i, n in enumerate(self.nodes) if n.primitive == "leaf"]


class Var:
    __array_priority__ = 1000

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.id = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)


def value(x):
    """Underlying array of a Var, or the argument as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot mix Vars from different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _apply(primitive, args, out, grad_fns):
    """Record ``out`` on the tape shared by the Var members of ``args``.

    ``grad_fns[i](g)`` maps the output cotangent to the cotangent of args[i].
    """
    tape = _tape_of(args)
    if tape is None:
        return out
    parents = [a for a in args if isinstance(a, Var)]
    fns = [fn for a, fn in zip(args, grad_fns) if isinstance(a, Var)]

    def backward(g):
        return tuple(fn(g) for fn in fns)

    return tape.record(primitive, out, parents, backward)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    return _apply("add", (a, b), av + bv,
                  (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _apply("sub", (a, b), av - bv,
                  (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _apply("mul", (a, b), av * bv,
                  (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _apply("div", (a, b), out,
                  (lambda g: _unbroadcast(g / bv, av.shape),
                   lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _apply("neg", (a,), -value(a), (lambda g: -g,))


def square(a):
    av = value(a)
    return _apply("square", (a,), av * av, (lambda g: 2.0 * g * av,))


def tanh(a):
    out = np.tanh(value(a))
    return _apply("tanh", (a,), out, (lambda g: g * (1.0 - out * out),))


def exp(a):
    out = np.exp(value(a))
    return _apply("exp", (a,), out, (lambda g: g * out,))


def log(a):
    av = value(a)
    return _apply("log", (a,), np.log(av), (lambda g: g / av,))


# -- reductions and shape ---------------------------------------------------

def sum_(a, axis=None):
    av = value(a)
    out = np.sum(av, axis=axis)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _apply("sum", (a,), np.asarray(out), (grad,))


def dot(a, b):
    """Inner product of two vectors (or Frobenius product of equal arrays)."""
    return sum_(mul(a, b))


def reshape(a, shape):
    av = value(a)
    return _apply("reshape", (a,), av.reshape(shape), (lambda g: g.reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else np.argsort(axes)
    return _apply("transpose", (a,), out, (lambda g: np.transpose(g, inv),))


def getitem(a, idx):
    av = value(a)

    def grad(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return _apply("getitem", (a,), np.array(av[idx]), (grad,))


def concat(parts, axis=-1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(i):
        def grad(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(sl)]
        return grad

    return _apply("concat", tuple(parts), out, tuple(make(i) for i in range(len(parts))))


def tril(a, k=0):
    mask = np.tril(np.ones(value(a).shape), k)
    return mul(a, mask)


def diag(a):
    """Diagonal of a square matrix as a vector."""
    av = value(a)
    n = av.shape[0]

    def grad(g):
        return np.diag(g) if n else np.zeros_like(av)

    return _apply("diag", (a,), np.diag(av).copy(), (grad,))


def diagflat(a):
    av = value(a)
    return _apply("diagflat", (a,), np.diag(av), (lambda g: np.diag(g).copy(),))


def trace(a):
    return sum_(diag(a))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def grad_a(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:
            return bv @ g
        if bv.ndim == 1:
            return np.outer(g, bv)
        return g @ bv.T

    def grad_b(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return _apply("matmul", (a, b), out, (grad_a, grad_b))


def solve(a, b):
    """``a^{-1} b`` for a square nonsingular ``a``."""
    av, bv = value(a), value(b)
    out = np.linalg.solve(av, bv)

    def grad_b(g):
        return np.linalg.solve(av.T, g)

    def grad_a(g):
        gb = np.linalg.solve(av.T, g)
        return -(np.outer(gb, out) if out.ndim == 1 else gb @ out.T)

    return _apply("solve", (a, b), out, (grad_a, grad_b))


def logdet(a):
    """log-determinant of a symmetric positive-definite matrix."""
    av = value(a)
    L = np.linalg.cholesky(av)
    out = 2.0 * np.sum(np.log(np.diag(L)))

    def grad(g):
        Linv = np.linalg.inv(L)
        return g * (Linv.T @ Linv)

    return _apply("logdet", (a,), np.asarray(out), (grad,))


# -- driver -----------------------------------------------------------------

def backward(tape: Tape, output: Var) -> dict:
    """Gradients of the scalar ``output`` w.r.t. every leaf of ``tape``.

    Nodes are visited once, in reverse id order. Leaves that do not reach the
    output get zero gradients.
    """
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if output.value.size != 1:
        raise NonScalarOutput(f"output has shape {output.value.shape}")
    grads: list = [None] * (output.id + 1)
    grads[output.id] = np.ones_like(output.value)
    nodes = tape.nodes
    for i in range(output.id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.backward is None:
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        if node.primitive != "leaf":
            grads[i] = None  # interior cotangents are not returned; free them early
    out = {}
    for i, node in enumerate(nodes):
        if node.primitive == "leaf":
            g = grads[i] if i < len(grads) else None
            out[i] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.value.shape)
    return out


def grad_check(f, theta, step=1e-5):
    """Max relative discrepancy between autodiff and central differences.

    ``f`` maps a parameter vector (``Var`` or array) to a scalar.
    """
    theta = np.array(theta, dtype=np.float64)
    tape = Tape()
    leaf = tape.var(theta)
    out = f(leaf)
    if isinstance(out, Var):
        ad = backward(tape, out)[leaf.id].ravel()
    else:
        ad = np.zeros(theta.size)
    fd = np.empty(theta.size)
    flat = theta.ravel()
    for i in range(theta.size):
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        fp = float(value(f(plus.reshape(theta.shape))))
        fm = float(value(f(minus.reshape(theta.shape))))
        fd[i] = (fp - fm) / (2.0 * step)
    if theta.size == 0:
        return 0.0
    return float(np.max(np.abs(ad - fd) / np.maximum(1e-8, np.abs(fd))))


def flatten_params(params):
    """Concatenate a name -> array dict into one vector (insertion order)."""
    return np.concatenate([np.ravel(v) for v in params.values()]) if params else np.zeros(0)


def unflatten_params(theta, like):
    """Split ``theta`` (array or Var) back into arrays shaped like ``like``."""
    out, pos = {}, 0
    for name, ref in like.items():
        shape = np.shape(ref)
        n = int(np.prod(shape, dtype=int))
        out[name] = reshape(getitem(theta, slice(pos, pos + n)), shape)
        pos += n
    return out


def grad_check_params(f, params, step=1e-5):
    """``grad_check`` for a function of a parameter dict."""
    return grad_check(lambda theta: f(unflatten_params(theta, params)),
                      flatten_params(params), step)

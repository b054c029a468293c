"""Reverse-mode differentiation on an explicit tape.

Nodes carry numpy arrays (scalars are 0-d arrays); the tape records
operations in execution order, so reverse iteration is already a reverse
topological order. A stop-gradient barrier is a first-class operation:
values pass through, adjoints do not.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError

LOG_EPS = 1e-12  # shared floor inside every log so losses are comparable


class Tape:
    """Operation record for one forward/backward pass. Single use."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def _register(self, node):
        node.idx = len(self.nodes)
        self.nodes.append(node)

    def leaf(self, value, key=None):
        """Create a leaf node. `key` marks it as a named parameter."""
        return DiffValue(self, value, key=key)


class DiffValue:
    """One node on a tape: value, gradient slot, parent links, local vjp."""

    __slots__ = ("tape", "value", "grad", "parents", "vjp", "idx", "key")

    def __init__(self, tape, value, parents=(), vjp=None, key=None):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError("non-finite value entered the tape")
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.key = key
        tape._register(self)

    # -- convenience arithmetic ------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(self.tape, other))

    def __rsub__(self, other):
        return sub(_wrap(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _wrap(self.tape, other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def item(self):
        return float(self.value)


def _wrap(tape, x):
    if isinstance(x, DiffValue):
        return x
    return DiffValue(tape, x)


def _node(tape, value, parents, vjp):
    return DiffValue(tape, value, parents=parents, vjp=vjp)


# -- primitive operations ------------------------------------------------

def _unbroadcast(g, shape):
    """Sum the adjoint back down to a broadcast parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    sa, sb = a.value.shape, b.value.shape
    return _node(a.tape, a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    sa, sb = a.value.shape, b.value.shape
    return _node(a.tape, a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = a.value, b.value
    return _node(a.tape, av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape),
                            _unbroadcast(g * av, bv.shape)))


def scale(a, c):
    c = float(c)
    return _node(a.tape, a.value * c, (a,), lambda g: (g * c,))


def matvec(w, x):
    """w: (m, n) parameter node, x: (n,) node -> (m,)."""
    wv, xv = w.value, x.value
    return _node(w.tape, wv @ xv, (w, x),
                 lambda g: (np.outer(g, xv), wv.T @ g))


def relu(a):
    mask = a.value > 0.0
    return _node(a.tape, a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _node(a.tape, s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a):
    e = np.exp(a.value)
    return _node(a.tape, e, (a,), lambda g: (g * e,))


def log_floored(a):
    """log(max(x, eps)); gradient is zero below the floor."""
    v = np.maximum(a.value, LOG_EPS)
    inside = a.value >= LOG_EPS
    return _node(a.tape, np.log(v), (a,), lambda g: (g * inside / v,))


def rsqrt(a):
    v = a.value ** -0.5
    return _node(a.tape, v, (a,), lambda g: (-0.5 * g * v / a.value,))


def vsum(a):
    shape = a.value.shape
    return _node(a.tape, a.value.sum(), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def vmean(a):
    n = a.value.size
    shape = a.value.shape
    return _node(a.tape, a.value.mean(), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def pick(a, i):
    i = int(i)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[i] = g
        return (out,)

    return _node(a.tape, a.value[i], (a,), vjp)


def square(a):
    av = a.value
    return _node(a.tape, av * av, (a,), lambda g: (2.0 * g * av,))


def mean_of(values):
    """Mean of a list of same-shaped nodes."""
    acc = values[0]
    for v in values[1:]:
        acc = add(acc, v)
    return scale(acc, 1.0 / len(values))


def stop_gradient(a):
    """Barrier: value passes through, the adjoint stops here."""
    return DiffValue(a.tape, a.value.copy())


def backward(tape, loss):
    """Fill gradients of every node reachable from `loss`.

    Returns {key: grad} for keyed (parameter) leaves. The tape is consumed;
    a second backward on the same tape raises.
    """
    if tape.consumed:
        raise NumericError("tape already consumed; re-run forward before backward")
    if loss.value.shape != ():
        raise NumericError("backward expects a scalar loss")
    tape.consumed = True

    loss.grad = np.ones(())
    for node in reversed(tape.nodes[: loss.idx + 1]):
        if node.grad is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(node.grad)):
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + pg

    grads = {}
    for node in tape.nodes:
        if node.key is not None:
            g = node.grad if node.grad is not None else np.zeros_like(node.value)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{node.key}'")
            grads.setdefault(node.key, np.zeros_like(node.value))
            grads[node.key] = grads[node.key] + g
    return grads

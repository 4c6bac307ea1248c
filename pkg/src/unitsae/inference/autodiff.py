"""Reverse-mode automatic differentiation on a dynamically built expression graph.

Every node holds a numpy value (scalar or array) plus the vector-Jacobian
products that route an upstream gradient back to its parents.  Operations are
vectorised, so a log-density over thousands of observations is a graph of a
few dozen nodes rather than thousands of scalar ones.

    >>> x = Var(np.array([1.0, 2.0]))
    >>> y = sum_(x * x)
    >>> backward(y)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla
from scipy.special import expit, log_expit

__all__ = [
    "Var",
    "backward",
    "value_and_grad",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "square",
    "sigmoid",
    "log_sigmoid",
    "softplus",
    "tanh",
    "sum_",
    "take",
    "concat",
    "matmul",
    "logsumexp",
    "cholesky",
    "reshape",
]


class Var:
    """A node in the expression graph."""

    __slots__ = ("value", "parents", "grad")
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = value
        # tuple of (parent Var, vjp callable mapping upstream grad -> parent grad)
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

    def __len__(self):
        return len(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _node(value, *pairs):
    parents = tuple((p, f) for p, f in pairs if isinstance(p, Var))
    if not parents:
        return value
    return Var(value, parents)


def backward(out):
    """Populate ``.grad`` of every node reachable from scalar ``out``."""
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        node.grad = None
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    out.grad = np.ones_like(out.value, dtype=float)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = _unbroadcast(vjp(g), np.shape(parent.value))
            parent.grad = pg if parent.grad is None else parent.grad + pg


def value_and_grad(fn, x):
    """Evaluate scalar ``fn`` at array ``x`` and return ``(value, gradient)``."""
    xv = Var(np.asarray(x, dtype=float))
    out = fn(xv)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(xv.value)
    backward(out)
    g = xv.grad if xv.grad is not None else np.zeros_like(xv.value)
    return float(out.value), g


# elementwise binary -------------------------------------------------------
def add(a, b):
    return _node(_val(a) + _val(b), (a, lambda g: g), (b, lambda g: g))


def neg(a):
    return _node(-_val(a), (a, lambda g: -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _node(av * bv, (a, lambda g: g * bv), (b, lambda g: g * av))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _node(out, (a, lambda g: g / bv), (b, lambda g: -g * out / bv))


def power(a, k):
    if isinstance(k, Var):
        raise TypeError("only constant exponents are supported")
    av = _val(a)
    return _node(av**k, (a, lambda g: g * k * av ** (k - 1)))


# elementwise unary --------------------------------------------------------
def exp(a):
    out = np.exp(_val(a))
    return _node(out, (a, lambda g: g * out))


def log(a):
    av = _val(a)
    return _node(np.log(av), (a, lambda g: g / av))


def log1p(a):
    av = _val(a)
    return _node(np.log1p(av), (a, lambda g: g / (1.0 + av)))


def sqrt(a):
    out = np.sqrt(_val(a))
    return _node(out, (a, lambda g: g * 0.5 / out))


def square(a):
    av = _val(a)
    return _node(av * av, (a, lambda g: 2.0 * g * av))


def sigmoid(a):
    out = expit(_val(a))
    return _node(out, (a, lambda g: g * out * (1.0 - out)))


def log_sigmoid(a):
    av = _val(a)
    return _node(log_expit(av), (a, lambda g: g * expit(-av)))


def softplus(a):
    av = _val(a)
    return _node(np.logaddexp(0.0, av), (a, lambda g: g * expit(av)))


def tanh(a):
    out = np.tanh(_val(a))
    return _node(out, (a, lambda g: g * (1.0 - out * out)))


# reductions and structure -------------------------------------------------
def sum_(a, axis=None):
    av = _val(a)
    shape = np.shape(av)
    if axis is None:
        return _node(np.sum(av), (a, lambda g: np.broadcast_to(g, shape)))

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _node(np.sum(av, axis=axis), (a, vjp))


def take(a, idx):
    """Gather ``a[idx]`` along the first axis; repeated indices accumulate."""
    av = _val(a)
    idx = np.asarray(idx)

    def vjp(g):
        if av.ndim == 1:
            return np.bincount(idx.ravel(), weights=np.ravel(g), minlength=av.shape[0])
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _node(av[idx], (a, vjp))


def getitem(a, idx):
    av = _val(a)

    def vjp(g):
        out = np.zeros_like(av, dtype=float)
        np.add.at(out, idx, g)
        return out

    return _node(av[idx], (a, vjp))


def reshape(a, shape):
    av = _val(a)
    old = np.shape(av)
    return _node(np.reshape(av, shape), (a, lambda g: np.reshape(g, old)))


def transpose(a):
    return _node(np.transpose(_val(a)), (a, lambda g: np.transpose(g)))


def concat(parts):
    vals = [np.atleast_1d(_val(p)) for p in parts]
    sizes = np.cumsum([v.shape[0] for v in vals])[:-1]
    out = np.concatenate(vals)
    pairs = []
    for k, p in enumerate(parts):
        shape = np.shape(_val(p))

        def vjp(g, k=k, shape=shape):
            return np.reshape(np.split(g, sizes)[k], shape)

        pairs.append((p, vjp))
    return _node(out, *pairs)


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def vjp_a(g):
        if bv.ndim == 1:
            return np.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T if av.ndim == 2 else bv @ g

    def vjp_b(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        return av.T @ g if np.ndim(g) else av.T * g

    return _node(av @ bv, (a, vjp_a), (b, vjp_b))


def logsumexp(a):
    av = _val(a)
    mx = np.max(av)
    e = np.exp(av - mx)
    s = e.sum()
    return _node(mx + np.log(s), (a, lambda g: g * e / s))


def cholesky(a):
    """Lower Cholesky factor with the symmetric reverse-mode rule."""
    av = _val(a)
    L = np.linalg.cholesky(av)

    def vjp(g):
        P = L.T @ np.tril(g)
        P = np.tril(P) - 0.5 * np.diag(np.diag(P))
        # L^{-T} P L^{-1}
        Y = sla.solve_triangular(L, P, lower=True, trans="T", check_finite=False)
        X = sla.solve_triangular(L, Y.T, lower=True, trans="T", check_finite=False).T
        return 0.5 * (X + X.T)

    return _node(L, (a, vjp))

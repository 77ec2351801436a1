"""Reverse-mode automatic differentiation over a recorded tape.

Layer code is written once against the functions in this module. Called with
plain numpy arrays they compute values directly (the streaming path); called
with :class:`Var` arguments they also record the operation on the owning
:class:`Tape` so that :meth:`Tape.grad` can run the reverse sweep.

Example::

    tape = Tape()
    w = tape.param("w", np.array([1.0, -2.0]))
    loss = ad.sum(w * w)
    tape.grad(loss)["w"]          # array([ 2., -4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "parents", "vjp", "fwd", "name", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, tape, value, parents=(), vjp=None, fwd=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.fwd = fwd
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape})"

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

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive operations plus a parameter registry."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        v = Var(self, np.array(value, dtype=np.float64), name=name)
        self.params[name] = v
        return v

    def _record(self, value, parents, vjp, fwd) -> Var:
        v = Var(self, value, parents, vjp, fwd)
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def n_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()], dtype=np.int64))

    def grad(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter."""
        if not isinstance(loss, Var):
            # loss does not depend on any parameter
            return {k: np.zeros_like(p.value) for k, p in self.params.items()}
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        stop = loss.index
        for node in reversed(self.nodes[: stop + 1] if stop >= 0 else []):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for name, p in self.params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
        return out

    def replay(self, overrides: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every recorded node from the parameter values.

        ``overrides`` substitutes parameter values by name. Returns the node
        values in tape order; with no overrides they equal the recorded ones.
        """
        values: dict[int, np.ndarray] = {}
        for name, p in self.params.items():
            values[id(p)] = p.value if not overrides or name not in overrides else overrides[name]
        out = []
        for node in self.nodes:
            args = [values[id(p)] if id(p) in values else p.value for p in node.parents]
            val = node.fwd(*args)
            values[id(node)] = val
            out.append(val)
        return out


def value(x):
    """Strip a Var down to its array value (no-op for arrays)."""
    return x.value if isinstance(x, Var) else x


def detach(x):
    return np.array(value(x), copy=True)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unary(x, f: Callable, df: Callable):
    """df(x_value, out_value) returns the local derivative (elementwise)."""
    if not isinstance(x, Var):
        return f(x)
    xv = x.value
    out = f(xv)
    return x.tape._record(out, (x,), lambda g: (g * df(xv, out),), f)


def _binary(a, b, f: Callable, da: Callable, db: Callable):
    """da/db(g, av, bv, out) give the upstream-weighted partials before unbroadcast."""
    tape = _tape_of(a, b)
    if tape is None:
        return f(a, b)
    av, bv = value(a), value(b)
    out = f(av, bv)
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    ashape, bshape = np.shape(av), np.shape(bv)
    if a_var and b_var:
        return tape._record(
            out,
            (a, b),
            lambda g: (unbroadcast(da(g, av, bv, out), ashape), unbroadcast(db(g, av, bv, out), bshape)),
            f,
        )
    if a_var:
        return tape._record(
            out, (a,), lambda g: (unbroadcast(da(g, av, bv, out), ashape),), lambda x: f(x, bv)
        )
    return tape._record(
        out, (b,), lambda g: (unbroadcast(db(g, av, bv, out), bshape),), lambda y: f(av, y)
    )


def add(a, b):
    return _binary(a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b):
    return _binary(
        a, b, np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b)
    )


def neg(x):
    return _unary(x, np.negative, lambda x, o: -1.0)


def _matmul_grad_a(g, a, b, o):
    return g @ b.T


def _matmul_grad_b(g, a, b, o):
    a2 = np.reshape(a, (-1, np.shape(a)[-1]))
    g2 = np.reshape(g, (-1, np.shape(b)[-1]))
    return a2.T @ g2


def matmul(a, b):
    """``a @ b`` with ``b`` a 2-D matrix and ``a`` of shape (..., n)."""
    if np.ndim(value(b)) != 2:
        raise ContractError("matmul right operand must be 2-D")
    if np.shape(value(a))[-1] != np.shape(value(b))[0]:
        raise ContractError(f"matmul shape mismatch {np.shape(value(a))} @ {np.shape(value(b))}")
    return _binary(a, b, np.matmul, _matmul_grad_a, _matmul_grad_b)


def exp(x):
    return _unary(x, np.exp, lambda x, o: o)


def log(x):
    return _unary(x, np.log, lambda x, o: 1.0 / x)


def sin(x):
    return _unary(x, np.sin, lambda x, o: np.cos(x))


def cos(x):
    return _unary(x, np.cos, lambda x, o: -np.sin(x))


def tanh(x):
    return _unary(x, np.tanh, lambda x, o: 1.0 - o * o)


def sigmoid(x):
    return _unary(x, kernels.sigmoid, lambda x, o: o * (1.0 - o))


def softplus(x):
    return _unary(x, kernels.softplus, lambda x, o: kernels.sigmoid(x))


def softsign(x):
    def d(x, o):
        s = 1.0 + np.abs(x)
        return 1.0 / (s * s)

    return _unary(x, kernels.softsign, d)


def _gelu_grad(x, o):
    inner = kernels.GELU_C * (x + kernels.GELU_K * x**3)
    t = np.tanh(inner)
    dinner = kernels.GELU_C * (1.0 + 3.0 * kernels.GELU_K * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def gelu(x):
    return _unary(x, kernels.gelu, _gelu_grad)


def swish(x, beta=1.0):
    """x * sigmoid(beta * x); ``beta`` may be a learnable Var."""
    return mul(x, sigmoid(mul(beta, x)))


def square(x):
    return _unary(x, np.square, lambda x, o: 2.0 * x)


def abs(x):  # noqa: A001 - mirrors numpy naming
    return _unary(x, np.abs, lambda x, o: np.sign(x))


def sum(x, axis=None, keepdims=False):  # noqa: A001
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.shape

    def f(v):
        return np.sum(v, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._record(f(x.value), (x,), vjp, f)


def mean(x, axis=None):
    n = value(x).size if axis is None else np.shape(value(x))[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    orig = x.shape
    return x.tape._record(
        np.reshape(x.value, shape), (x,), lambda g: (np.reshape(g, orig),), lambda v: np.reshape(v, shape)
    )


def transpose(x):
    if not isinstance(x, Var):
        return np.swapaxes(x, -1, -2)
    f = lambda v: np.swapaxes(v, -1, -2)  # noqa: E731
    return x.tape._record(f(x.value), (x,), lambda g: (np.swapaxes(g, -1, -2),), f)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx):
    if not isinstance(x, Var):
        return x[idx]
    shape = x.shape
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return x.tape._record(x.value[idx], (x,), vjp, lambda v: v[idx])


def concat(xs: Sequence, axis: int = -1):
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    out = np.concatenate(vals, axis=axis)
    var_pos = [i for i, x in enumerate(xs) if isinstance(x, Var)]
    sizes = [np.shape(v)[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        parts = []
        for i in var_pos:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    def fwd(*pv):
        full = list(vals)
        for i, v in zip(var_pos, pv):
            full[i] = v
        return np.concatenate(full, axis=axis)

    return tape._record(out, tuple(xs[i] for i in var_pos), vjp, fwd)

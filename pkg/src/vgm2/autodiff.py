"""Reverse-mode automatic differentiation on a flat tape.

Values are dense row-major float64 numpy buffers of rank <= 2.  Every
primitive op appends one node (value, parent ids, vjp closure) to the tape;
the backward pass walks nodes in reverse creation order exactly once and
accumulates gradients into a node-id -> buffer map.

The public math functions (``exp``, ``log``, ``lgamma``, ...) are
polymorphic: given a :class:`Var` they record a tape op, given a plain
array/scalar they evaluate with numpy directly.  Model code is therefore
written once and reused for training (differentiable) and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import special


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, shapes) -> None:
        self.op = op
        self.shapes = tuple(shapes)
        super().__init__(f"op {op!r}: incompatible operand shapes {self.shapes}")


class NonScalarLossError(AutodiffError):
    def __init__(self, shape) -> None:
        super().__init__(f"backward requires a scalar loss, got shape {shape}")


class NonFiniteGradientError(AutodiffError):
    def __init__(self, name: str) -> None:
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


def _buf(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (gdim, sdim) in enumerate(zip(grad.shape, shape)):
        if sdim == 1 and gdim != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Handle into a tape node; shape is fixed at creation."""

    __slots__ = ("tape", "nid")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, tape: "Tape", nid: int) -> None:
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.nid]

    @property
    def shape(self) -> tuple:
        return self.tape._values[self.nid].shape

    def __repr__(self) -> str:
        return f"Var(nid={self.nid}, shape={self.shape})"

    # arithmetic delegates to the module-level polymorphic functions
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of primitive ops; single-threaded per owner."""

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._parents: list[tuple] = []
        self._vjps: list = []

    def __len__(self) -> int:
        return len(self._values)

    def _push(self, value: np.ndarray, parents=(), vjp=None) -> Var:
        self._values.append(value)
        self._parents.append(tuple(parents))
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1)

    def variable(self, value) -> Var:
        """A leaf with respect to which gradients are requested."""
        return self._push(_buf(value))

    # constants are mechanically identical leaves; the alias documents intent
    constant = variable

    def lift(self, x) -> Var:
        return x if isinstance(x, Var) else self.constant(x)

    def backward(self, loss: Var) -> dict:
        """Gradient map node-id -> buffer for d(loss)/d(node).

        Visits nodes in reverse creation order exactly once.
        """
        if loss.tape is not self:
            raise AutodiffError("loss belongs to a different tape")
        if loss.shape != ():
            raise NonScalarLossError(loss.shape)
        grads: dict[int, np.ndarray] = {loss.nid: np.ones((), dtype=np.float64)}
        for nid in range(loss.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            vjp = self._vjps[nid]
            if vjp is None:
                continue
            for pid, pg in zip(self._parents[nid], vjp(g)):
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads

    def grad(self, grads: dict, var: Var) -> np.ndarray:
        """Gradient buffer for ``var``, zeros if the loss never touched it."""
        g = grads.get(var.nid)
        return np.zeros(var.shape) if g is None else g


# ---------------------------------------------------------------------------
# op construction helpers


def _coerce_pair(op: str, a, b):
    """Return (tape, a_var_or_buf, b_var_or_buf) with at least one Var."""
    if isinstance(a, Var):
        tape = a.tape
        bv = b if isinstance(b, Var) else None
        return tape, a, (bv if bv is not None else _buf(b))
    tape = b.tape
    return tape, _buf(a), b


def _elementwise_binary(op: str, a, b, fwd, dda, ddb):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return fwd(_buf(a), _buf(b))
    tape = a.tape if isinstance(a, Var) else b.tape
    av = a if isinstance(a, Var) else tape.constant(a)
    bv = b if isinstance(b, Var) else tape.constant(b)
    x, y = av.value, bv.value
    try:
        out = fwd(x, y)
    except ValueError:
        raise ShapeMismatchError(op, (x.shape, y.shape)) from None

    def vjp(g):
        return (
            _unbroadcast(dda(g, x, y), x.shape),
            _unbroadcast(ddb(g, x, y), y.shape),
        )

    return tape._push(out, (av.nid, bv.nid), vjp)


def _elementwise_unary(op: str, x, fwd, dfdx):
    if not isinstance(x, Var):
        return fwd(_buf(x))
    val = x.value
    out = fwd(val)

    def vjp(g):
        return (g * dfdx(val, out),)

    return x.tape._push(out, (x.nid,), vjp)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    return _elementwise_binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _elementwise_binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _elementwise_binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _elementwise_binary(
        "div", a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def maximum(a, b):
    def fwd(x, y):
        return np.maximum(x, y)

    def dda(g, x, y):
        return g * (x >= y)

    def ddb(g, x, y):
        return g * (x < y)

    return _elementwise_binary("maximum", a, b, fwd, dda, ddb)


def power(x, exponent):
    """x ** p for a constant real exponent; x >= 0 when p is fractional."""
    p = float(exponent)

    def fwd(v):
        return v**p

    def dfdx(v, out):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * v ** (p - 1.0)
        # subgradient 0 at v == 0 for p < 1 (q-curve hits this at zero distance)
        return np.where(v == 0.0, 0.0, d)

    return _elementwise_unary("power", x, fwd, dfdx)


def matmul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _buf(a) @ _buf(b)
    tape = a.tape if isinstance(a, Var) else b.tape
    av = a if isinstance(a, Var) else tape.constant(a)
    bv = b if isinstance(b, Var) else tape.constant(b)
    x, y = av.value, bv.value
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeMismatchError("matmul", (x.shape, y.shape))
    out = x @ y

    def vjp(g):
        return (g @ y.T, x.T @ g)

    return tape._push(out, (av.nid, bv.nid), vjp)


# ---------------------------------------------------------------------------
# elementwise functions


def exp(x):
    return _elementwise_unary("exp", x, np.exp, lambda v, out: out)


def log(x):
    return _elementwise_unary("log", x, np.log, lambda v, out: 1.0 / v)


def sqrt(x):
    return _elementwise_unary("sqrt", x, np.sqrt, lambda v, out: 0.5 / out)


def tanh(x):
    return _elementwise_unary("tanh", x, np.tanh, lambda v, out: 1.0 - out * out)


def relu(x):
    return _elementwise_unary("relu", x, lambda v: np.maximum(v, 0.0), lambda v, out: (v > 0.0).astype(np.float64))


def _sigmoid_value(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    def fwd(v):
        return _sigmoid_value(np.atleast_1d(v)).reshape(np.shape(v))

    return _elementwise_unary("sigmoid", x, fwd, lambda v, out: out * (1.0 - out))


def softplus(x):
    def fwd(v):
        return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def dfdx(v, out):
        return _sigmoid_value(np.atleast_1d(v)).reshape(np.shape(v))

    return _elementwise_unary("softplus", x, fwd, dfdx)


def softplus_inverse(y):
    """Inverse of softplus on positive arrays (plain numpy, not an op)."""
    y = _buf(y)
    small = y < 30.0
    out = np.array(y, copy=True)
    out[small] = np.log(np.expm1(y[small]))
    return out


def lgamma(x):
    return _elementwise_unary("lgamma", x, special.lgamma, lambda v, out: special.digamma(v))


def digamma(x):
    return _elementwise_unary("digamma", x, special.digamma, lambda v, out: special.trigamma(v))


def clip(x, lo: float, hi: float):
    """Clamp with pass-through gradient strictly inside the interval."""

    def fwd(v):
        return np.clip(v, lo, hi)

    def dfdx(v, out):
        return ((v > lo) & (v < hi)).astype(np.float64)

    return _elementwise_unary("clip", x, fwd, dfdx)


# ---------------------------------------------------------------------------
# reductions and structure


def vsum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(_buf(x), axis=axis)
    val = x.value
    out = np.sum(val, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, val.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), val.shape).copy(),)

    return x.tape._push(_buf(out), (x.nid,), vjp)


def vmean(x, axis=None):
    if not isinstance(x, Var):
        return np.mean(_buf(x), axis=axis)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(vsum(x, axis=axis), 1.0 / n)


def logsumexp(x, axis=None):
    if not isinstance(x, Var):
        v = _buf(x)
        m = np.max(v, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
        return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    val = x.value
    m = np.max(val, axis=axis, keepdims=True)
    red = m + np.log(np.sum(np.exp(val - m), axis=axis, keepdims=True))
    out = np.squeeze(red, axis=axis) if axis is not None else red.reshape(())

    def vjp(g):
        soft = np.exp(val - red)
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return x.tape._push(_buf(out), (x.nid,), vjp)


def logaddexp(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.logaddexp(_buf(a), _buf(b))
    m = maximum(a, b)
    return add(m, log(add(exp(sub(a, m)), exp(sub(b, m)))))


def reshape(x, shape):
    if not isinstance(x, Var):
        return _buf(x).reshape(shape)
    val = x.value
    out = val.reshape(shape)

    def vjp(g):
        return (g.reshape(val.shape),)

    return x.tape._push(out, (x.nid,), vjp)


def gather_rows(x, idx):
    """Select rows by integer index; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.intp)
    if not isinstance(x, Var):
        return _buf(x)[idx]
    val = x.value
    out = val[idx]

    def vjp(g):
        acc = np.zeros_like(val)
        np.add.at(acc, idx, g)
        return (acc,)

    return x.tape._push(out, (x.nid,), vjp)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _buf(x)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)

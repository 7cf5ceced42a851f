"""Small automatic differentiation core over numpy arrays.

Two forward-mode number types (:class:`Dual` for first order, :class:`Dual2`
for second order along one direction) and an array-level reverse-mode
:class:`Tape`.  Model code is written once against the dispatch functions in
this module (``tanh``, ``exp``, ...) and the usual operators, and then runs
unchanged on plain arrays, on jets, or on tape variables.

Nesting
-------
Every jet carries an integer ``tag`` taken from a global counter when it is
seeded.  When two jets with different tags meet in a binary operation the one
with the higher tag (the more recently seeded perturbation) becomes the outer
layer and treats the other as a constant.  This avoids perturbation confusion
for forward-over-forward derivatives.

Tangent arrays may carry extra leading "direction" axes relative to the value;
they combine with values through ordinary numpy broadcasting.  All indexing
and reductions must therefore address trailing axes only (negative axes,
indices starting with ``...``).  A caller nesting two batched seeds gives the
earlier (inner-tagged) seed a singleton axis for the later seed's direction
axis.
"""
from __future__ import annotations

import itertools

import numpy as np

_tags = itertools.count(1)


def new_tag():
    return next(_tags)


class _Jet:
    __slots__ = ()
    __array_ufunc__ = None
    tag = 0


def _is_jet(x):
    return isinstance(x, _Jet)


def _outer(a, b):
    """Return the operand that must act as the outer layer, or None if equal."""
    ta = a.tag if _is_jet(a) else 0
    tb = b.tag if _is_jet(b) else 0
    if ta == tb:
        return None
    return a if ta > tb else b


def primal(x):
    """Strip every derivative layer and return the underlying array."""
    while _is_jet(x):
        x = x.val
    if isinstance(x, Var):
        return x.value
    return x


# ---------------------------------------------------------------------------
# First-order forward mode
# ---------------------------------------------------------------------------


class Dual(_Jet):
    """First-order jet ``val + tan * eps``.

    ``tan`` may have extra leading direction axes so that several directional
    derivatives are pushed through one evaluation.
    """

    __slots__ = ("val", "tan", "tag")

    def __init__(self, val, tan, tag=None):
        self.val = val
        self.tan = tan
        self.tag = new_tag() if tag is None else tag

    @classmethod
    def constant(cls, val, tag=None):
        return cls(val, np.zeros_like(primal(val), dtype=float), tag)

    def _new(self, val, tan):
        return Dual(val, tan, self.tag)

    def __repr__(self):
        return f"Dual(val={self.val!r}, tan={self.tan!r}, tag={self.tag})"

    def map(self, fn):
        """Apply ``fn`` to both components (e.g. to unpack nested jets)."""
        return self._new(fn(self.val), fn(self.tan))

    @property
    def shape(self):
        return np.shape(primal(self))

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__radd__(self)
        if o is self:
            return self._new(self.val + other, self.tan)
        return self._new(self.val + other.val, self.tan + other.tan)

    def __radd__(self, other):
        return self._new(other + self.val, self.tan)

    def __sub__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rsub__(self)
        if o is self:
            return self._new(self.val - other, self.tan)
        return self._new(self.val - other.val, self.tan - other.tan)

    def __rsub__(self, other):
        return self._new(other - self.val, -self.tan)

    def __neg__(self):
        return self._new(-self.val, -self.tan)

    def __mul__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rmul__(self)
        if o is self:
            return self._new(self.val * other, self.tan * other)
        return self._new(self.val * other.val,
                         self.tan * other.val + self.val * other.tan)

    def __rmul__(self, other):
        return self._new(other * self.val, other * self.tan)

    def __truediv__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rtruediv__(self)
        if o is self:
            return self._new(self.val / other, self.tan / other)
        q = self.val / other.val
        return self._new(q, (self.tan - q * other.tan) / other.val)

    def __rtruediv__(self, other):
        q = other / self.val
        return self._new(q, -q * self.tan / self.val)

    def __pow__(self, n):
        if _is_jet(n):
            raise TypeError("only constant exponents are supported")
        if n == 2:
            return self * self
        return self._new(self.val ** n, n * self.val ** (n - 1) * self.tan)

    def __matmul__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rmatmul__(self)
        if o is self:
            return self._new(self.val @ other, self.tan @ other)
        return self._new(self.val @ other.val,
                         self.tan @ other.val + self.val @ other.tan)

    def __rmatmul__(self, other):
        return self._new(other @ self.val, other @ self.tan)

    # structure ----------------------------------------------------------
    def __getitem__(self, idx):
        idx = _trailing_index(idx, self)
        return self._new(self.val[idx], self.tan[idx])

    def sum(self, axis=-1):
        _check_axis(axis)
        return self._new(sum_(self.val, axis), sum_(self.tan, axis))

    def swapaxes(self, a, b):
        _check_axis(a), _check_axis(b)
        return self._new(swapaxes(self.val, a, b), swapaxes(self.tan, a, b))

    # elementary functions ---------------------------------------------
    def _chain(self, fval, dfval):
        return self._new(fval, dfval * self.tan)


# ---------------------------------------------------------------------------
# Second-order forward mode along a single direction
# ---------------------------------------------------------------------------


class Dual2(_Jet):
    """Truncated Taylor jet ``(value, d1, d2)`` along one direction.

    ``d1`` is the first and ``d2`` the second directional derivative.
    """

    __slots__ = ("val", "d1", "d2", "tag")

    def __init__(self, val, d1, d2, tag=None):
        self.val = val
        self.d1 = d1
        self.d2 = d2
        self.tag = new_tag() if tag is None else tag

    @classmethod
    def constant(cls, val, tag=None):
        z = np.zeros_like(primal(val), dtype=float)
        return cls(val, z, z, tag)

    def _new(self, a, b, c):
        return Dual2(a, b, c, self.tag)

    def __repr__(self):
        return f"Dual2(val={self.val!r}, d1={self.d1!r}, d2={self.d2!r})"

    def map(self, fn):
        return self._new(fn(self.val), fn(self.d1), fn(self.d2))

    @property
    def shape(self):
        return np.shape(primal(self))

    def __add__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__radd__(self)
        if o is self:
            return self._new(self.val + other, self.d1, self.d2)
        return self._new(self.val + other.val, self.d1 + other.d1,
                         self.d2 + other.d2)

    def __radd__(self, other):
        return self._new(other + self.val, self.d1, self.d2)

    def __sub__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rsub__(self)
        if o is self:
            return self._new(self.val - other, self.d1, self.d2)
        return self._new(self.val - other.val, self.d1 - other.d1,
                         self.d2 - other.d2)

    def __rsub__(self, other):
        return self._new(other - self.val, -self.d1, -self.d2)

    def __neg__(self):
        return self._new(-self.val, -self.d1, -self.d2)

    def __mul__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rmul__(self)
        if o is self:
            return self._new(self.val * other, self.d1 * other,
                             self.d2 * other)
        a0, a1, a2 = self.val, self.d1, self.d2
        b0, b1, b2 = other.val, other.d1, other.d2
        return self._new(a0 * b0, a1 * b0 + a0 * b1,
                         a2 * b0 + 2.0 * (a1 * b1) + a0 * b2)

    def __rmul__(self, other):
        return self._new(other * self.val, other * self.d1, other * self.d2)

    def _reciprocal(self):
        r = 1.0 / self.val
        r2 = r * r
        return self._new(r, -self.d1 * r2,
                         2.0 * (self.d1 * self.d1) * (r2 * r) - self.d2 * r2)

    def __truediv__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rtruediv__(self)
        if o is self:
            return self._new(self.val / other, self.d1 / other,
                             self.d2 / other)
        return self * other._reciprocal()

    def __rtruediv__(self, other):
        return other * self._reciprocal()

    def __pow__(self, n):
        if _is_jet(n):
            raise TypeError("only constant exponents are supported")
        if n == 2:
            return self * self
        v = self.val
        return self._chain2(v ** n, n * v ** (n - 1), n * (n - 1) * v ** (n - 2))

    def __matmul__(self, other):
        o = _outer(self, other)
        if o is other:
            return other.__rmatmul__(self)
        if o is self:
            return self._new(self.val @ other, self.d1 @ other,
                             self.d2 @ other)
        a0, a1, a2 = self.val, self.d1, self.d2
        b0, b1, b2 = other.val, other.d1, other.d2
        return self._new(a0 @ b0, a1 @ b0 + a0 @ b1,
                         a2 @ b0 + 2.0 * (a1 @ b1) + a0 @ b2)

    def __rmatmul__(self, other):
        return self._new(other @ self.val, other @ self.d1, other @ self.d2)

    def __getitem__(self, idx):
        idx = _trailing_index(idx, self)
        return self._new(self.val[idx], self.d1[idx], self.d2[idx])

    def sum(self, axis=-1):
        _check_axis(axis)
        return self.map(lambda c: sum_(c, axis))

    def swapaxes(self, a, b):
        return self.map(lambda c: swapaxes(c, a, b))

    def _chain2(self, f0, f1, f2):
        a1 = self.d1
        return self._new(f0, f1 * a1, f2 * (a1 * a1) + f1 * self.d2)


def _trailing_index(idx, jet):
    if not isinstance(idx, tuple):
        idx = (idx,)
    if idx and idx[0] is Ellipsis:
        return idx
    # a full index of the value's axes is the same as a trailing one
    if len(idx) == np.ndim(primal(jet)) and Ellipsis not in idx:
        return (Ellipsis,) + idx
    raise IndexError("jets only support trailing-axis indexing (x[..., i])")


def _check_axis(axis):
    if axis is None or axis >= 0:
        raise ValueError("jets only support negative (trailing) axes")


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Linear record of array operations for reverse-mode differentiation.

    Each node stores its parents' indices and one vector-Jacobian product
    closure per parent (the local partials).
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value):
        """Register a leaf and return its :class:`Var`."""
        return self._push(np.asarray(value, dtype=float), (), ())

    def _push(self, value, parents, vjps):
        self.nodes.append((tuple(parents), tuple(vjps)))
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, out, seed=None):
        """Accumulate adjoints of ``out`` into a list indexed by node id."""
        grads = [None] * len(self.nodes)
        grads[out.index] = (np.ones_like(out.value) if seed is None
                            else np.asarray(seed, dtype=float))
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            parents, vjps = self.nodes[i]
            for j, vjp in zip(parents, vjps):
                c = vjp(g)
                grads[j] = c if grads[j] is None else grads[j] + c
        return grads

    def grad(self, out, wrt):
        """Gradients of scalar ``out`` with respect to the leaves ``wrt``."""
        grads = self.backward(out)
        res = []
        for v in wrt:
            g = grads[v.index]
            res.append(np.zeros_like(v.value) if g is None else g)
        return res


class Var:
    """Array value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    def _op(self, value, parents, vjps):
        return self.tape._push(value, [p.index for p in parents], vjps)

    def _binary(self, other, value, ga, gb):
        if isinstance(other, Var):
            return self._op(value, [self, other], [ga, gb])
        return self._op(value, [self], [ga])

    def __add__(self, other):
        o = other.value if isinstance(other, Var) else other
        s, so = self.value.shape, np.shape(o)
        return self._binary(other, self.value + o,
                            lambda g: _unbroadcast(g, s),
                            lambda g: _unbroadcast(g, so))

    __radd__ = __add__

    def __sub__(self, other):
        o = other.value if isinstance(other, Var) else other
        s, so = self.value.shape, np.shape(o)
        return self._binary(other, self.value - o,
                            lambda g: _unbroadcast(g, s),
                            lambda g: -_unbroadcast(g, so))

    def __rsub__(self, other):
        s = self.value.shape
        return self._op(other - self.value, [self],
                        [lambda g: -_unbroadcast(g, s)])

    def __neg__(self):
        return self._op(-self.value, [self], [lambda g: -g])

    def __mul__(self, other):
        a = self.value
        b = other.value if isinstance(other, Var) else other
        return self._binary(other, a * b,
                            lambda g: _unbroadcast(g * b, a.shape),
                            lambda g: _unbroadcast(g * a, np.shape(b)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a = self.value
        b = other.value if isinstance(other, Var) else other
        q = a / b
        return self._binary(other, q,
                            lambda g: _unbroadcast(g / b, a.shape),
                            lambda g: _unbroadcast(-g * q / b, np.shape(b)))

    def __rtruediv__(self, other):
        b = self.value
        q = other / b
        return self._op(q, [self],
                        [lambda g: _unbroadcast(-g * q / b, b.shape)])

    def __pow__(self, n):
        a = self.value
        return self._op(a ** n, [self], [lambda g: g * n * a ** (n - 1)])

    def __matmul__(self, other):
        a = self.value
        b = other.value if isinstance(other, Var) else np.asarray(other)
        return self._binary(other, _mm(a, b),
                            lambda g: _matmul_vjp_left(g, a, b),
                            lambda g: _matmul_vjp_right(g, a, b))

    def __rmatmul__(self, other):
        a = np.asarray(other)
        b = self.value
        return self._op(_mm(a, b), [self], [lambda g: _matmul_vjp_right(g, a, b)])

    def __getitem__(self, idx):
        s = self.value.shape

        basic = all(isinstance(i, (int, slice)) or i is Ellipsis or i is None
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def vjp(g):
            out = np.zeros(s)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return out
        return self._op(self.value[idx], [self], [vjp])

    @property
    def T(self):
        return self._op(self.value.T, [self], [lambda g: g.T])

    def sum(self, axis=None):
        s = self.value.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, s).copy()
        return self._op(self.value.sum(axis=axis), [self], [vjp])

    def reshape(self, *shape):
        s = self.value.shape
        return self._op(self.value.reshape(*shape), [self],
                        [lambda g: g.reshape(s)])

    def swapaxes(self, a, b):
        return self._op(np.swapaxes(self.value, a, b), [self],
                        [lambda g: np.swapaxes(g, a, b)])

    def _unary(self, value, dvalue):
        return self._op(value, [self], [lambda g: g * dvalue])


def _mm(a, b):
    """``a @ b`` with stacked-times-matrix products done as one 2-D GEMM."""
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:])
    return a @ b


def _matmul_vjp_left(g, a, b):
    if b.ndim == 1:
        return _unbroadcast(g[..., None] * b, a.shape)
    return _unbroadcast(_mm(g, np.swapaxes(b, -1, -2)), a.shape)


def _matmul_vjp_right(g, a, b):
    if b.ndim == 1:
        gb = a.reshape(-1, a.shape[-1]).T @ np.broadcast_to(
            g, a.shape[:-1]).reshape(-1) if a.ndim > 1 else a * g
        return _unbroadcast(gb, b.shape)
    if a.ndim == 1:
        return _unbroadcast(a[:, None] * g[..., None, :], b.shape)
    if b.ndim == 2 and a.ndim >= 2:
        a2 = np.broadcast_to(a, g.shape[:-1] + a.shape[-1:])
        return a2.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)


# ---------------------------------------------------------------------------
# Dispatching elementary functions
# ---------------------------------------------------------------------------


def _sigmoid_np(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _softplus_np(z):
    return np.logaddexp(0.0, z)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return x._chain(e, e)
    if isinstance(x, Dual2):
        e = exp(x.val)
        return x._chain2(e, e, e)
    if isinstance(x, Var):
        e = np.exp(x.value)
        return x._unary(e, e)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return x._chain(log(x.val), 1.0 / x.val)
    if isinstance(x, Dual2):
        r = 1.0 / x.val
        return x._chain2(log(x.val), r, -(r * r))
    if isinstance(x, Var):
        return x._unary(np.log(x.value), 1.0 / x.value)
    x = np.asarray(x)
    if np.any(x <= 0):
        raise FloatingPointError("log evaluated at a non-positive argument")
    return np.log(x)


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.val)
        return x._chain(t, 1.0 - t * t)
    if isinstance(x, Dual2):
        t = tanh(x.val)
        s = 1.0 - t * t
        return x._chain2(t, s, -2.0 * (t * s))
    if isinstance(x, Var):
        t = np.tanh(x.value)
        return x._unary(t, 1.0 - t * t)
    return np.tanh(x)


def sin(x):
    if isinstance(x, Dual):
        return x._chain(sin(x.val), cos(x.val))
    if isinstance(x, Dual2):
        s = sin(x.val)
        return x._chain2(s, cos(x.val), -s)
    if isinstance(x, Var):
        return x._unary(np.sin(x.value), np.cos(x.value))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return x._chain(cos(x.val), -sin(x.val))
    if isinstance(x, Dual2):
        c = cos(x.val)
        return x._chain2(c, -sin(x.val), -c)
    if isinstance(x, Var):
        return x._unary(np.cos(x.value), -np.sin(x.value))
    return np.cos(x)


def sqrt(x):
    if isinstance(x, (Dual, Dual2)):
        return x ** 0.5
    if isinstance(x, Var):
        s = np.sqrt(x.value)
        return x._unary(s, 0.5 / s)
    return np.sqrt(x)


def sigmoid(x):
    if isinstance(x, Dual):
        s = sigmoid(x.val)
        return x._chain(s, s * (1.0 - s))
    if isinstance(x, Dual2):
        s = sigmoid(x.val)
        ds = s * (1.0 - s)
        return x._chain2(s, ds, ds * (1.0 - 2.0 * s))
    if isinstance(x, Var):
        s = _sigmoid_np(x.value)
        return x._unary(s, s * (1.0 - s))
    return _sigmoid_np(x)


def softplus(x):
    """``log(1 + exp(x))`` evaluated without overflow."""
    if isinstance(x, Dual):
        return x._chain(softplus(x.val), sigmoid(x.val))
    if isinstance(x, Dual2):
        s = sigmoid(x.val)
        return x._chain2(softplus(x.val), s, s * (1.0 - s))
    if isinstance(x, Var):
        return x._unary(_softplus_np(x.value), _sigmoid_np(x.value))
    return _softplus_np(x)


def relu(x):
    if isinstance(x, Dual):
        step = (primal(x) > 0).astype(float)
        return x._chain(relu(x.val), step)
    if isinstance(x, Dual2):
        step = (primal(x) > 0).astype(float)
        return x._chain2(relu(x.val), step, 0.0 * step)
    if isinstance(x, Var):
        return x._unary(np.maximum(x.value, 0.0), (x.value > 0).astype(float))
    return np.maximum(x, 0.0)


def sum_(x, axis=-1):
    if isinstance(x, (_Jet, Var)):
        return x.sum(axis=axis)
    return np.sum(x, axis=axis)


def swapaxes(x, a=-1, b=-2):
    if isinstance(x, (_Jet, Var)):
        return x.swapaxes(a, b)
    return np.swapaxes(x, a, b)


# ---------------------------------------------------------------------------
# Convenience drivers
# ---------------------------------------------------------------------------


def _check_finite(value, what):
    if not np.all(np.isfinite(primal(value))):
        raise FloatingPointError(f"{what} produced a non-finite value")


def directional_derivative(f, x, direction):
    """Return ``(f(x), grad f(x) . direction)`` by one forward-mode pass."""
    x = np.asarray(x, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if direction.shape != x.shape:
        raise ValueError("direction must have the same shape as x")
    with np.errstate(all="raise"):
        out = f(Dual(x, direction))
    if not isinstance(out, Dual):
        out = Dual.constant(out)
    _check_finite(out.val, "f")
    return float(out.val), float(out.tan)


def second_directional(f, x, direction):
    """Return ``(f, d1, d2)`` with ``d2 = dir^T H(x) dir``."""
    x = np.asarray(x, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if direction.shape != x.shape:
        raise ValueError("direction must have the same shape as x")
    with np.errstate(all="raise"):
        out = f(Dual2(x, direction, np.zeros_like(x)))
    if not isinstance(out, Dual2):
        return float(out), 0.0, 0.0
    _check_finite(out.val, "f")
    return float(out.val), float(out.d1), float(out.d2)


def gradient(f, x):
    """Reverse-mode gradient of a scalar function of a real vector."""
    x = np.asarray(x, dtype=float)
    tape = Tape()
    xv = tape.var(x)
    with np.errstate(all="raise"):
        out = f(xv)
    if not isinstance(out, Var):
        return np.zeros_like(x)
    if out.value.size != 1:
        raise ValueError("gradient requires a scalar-valued function")
    _check_finite(out.value, "f")
    (g,) = tape.grad(out, [xv])
    return g


def forward_gradient(f, x):
    """Gradient assembled from one batched forward-mode pass."""
    x = np.asarray(x, dtype=float)
    n = x.size
    out = f(Dual(x, np.eye(n).reshape((n,) + x.shape)))
    if not isinstance(out, Dual):
        return np.zeros_like(x)
    return np.asarray(out.tan, dtype=float).reshape(x.shape)

"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 ndarray together with the closures needed to
push gradients back to its parents.  Graphs are built define-by-run: every
functional op below accepts either ``Tensor`` or plain ndarray arguments and
only records a node when at least one argument is a ``Tensor``, so the same
forward code serves both training (differentiable) and inference (pure
numpy) paths.

The op set is deliberately small: elementwise arithmetic and activations,
matmul/einsum contractions, reductions, concatenation, gather/scatter, and a
few smooth rotation helpers (``sinc_sq``, ``cosc_sq``, ``arc_over_sin``)
whose series branches keep derivatives finite at zero rotation.  Everything
else in the package is composed from these.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "parameter", "value_of", "is_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "einsum2",
    "exp", "log", "sqrt", "square", "power", "absolute",
    "relu", "leaky_relu", "elu",
    "reduce_sum", "reduce_mean", "concat", "reshape",
    "take_rows", "take_axis", "slice_rows",
    "segment_sum", "softmax_rows", "row_normalize",
    "sinc_sq", "cosc_sq", "arc_over_sin", "cross",
]


class Tensor:
    """Node in a reverse-mode graph: a value plus backward plumbing."""

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        """Accumulate gradients of this (scalar) node into the whole graph."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar root")
        order = _topological_order(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def parameter(value):
    """Wrap an array as a leaf tensor (copied so callers keep ownership)."""
    return Tensor(np.array(value, dtype=np.float64))


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x):
    """Unwrap to a plain ndarray view (detached)."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _topological_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(node, grad):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += grad


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g_dim, s_dim) in enumerate(zip(grad.shape, shape)):
        if s_dim == 1 and g_dim != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _node(value, inputs, backward):
    parents = tuple(x for x in inputs if isinstance(x, Tensor))
    return Tensor(value, parents, backward)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.add(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)

    def backward(g):
        if is_tensor(a):
            _accumulate(a, _unbroadcast(g, av.shape))
        if is_tensor(b):
            _accumulate(b, _unbroadcast(g, bv.shape))

    return _node(av + bv, (a, b), backward)


def sub(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.subtract(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)

    def backward(g):
        if is_tensor(a):
            _accumulate(a, _unbroadcast(g, av.shape))
        if is_tensor(b):
            _accumulate(b, _unbroadcast(-g, bv.shape))

    return _node(av - bv, (a, b), backward)


def mul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.multiply(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)

    def backward(g):
        if is_tensor(a):
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if is_tensor(b):
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return _node(av * bv, (a, b), backward)


def div(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.divide(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)

    def backward(g):
        if is_tensor(a):
            _accumulate(a, _unbroadcast(g / bv, av.shape))
        if is_tensor(b):
            _accumulate(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    return _node(av / bv, (a, b), backward)


def neg(a):
    if not is_tensor(a):
        return -value_of(a)

    def backward(g):
        _accumulate(a, -g)

    return _node(-a.value, (a,), backward)


def matmul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return value_of(a) @ value_of(b)
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands; use einsum2 otherwise")

    def backward(g):
        if is_tensor(a):
            _accumulate(a, g @ bv.T)
        if is_tensor(b):
            _accumulate(b, av.T @ g)

    return _node(av @ bv, (a, b), backward)


def einsum2(subscripts, a, b):
    """Two-operand einsum with automatic backward.

    Each index of one operand must appear in the output or in the other
    operand (plain contractions only, no internal traces).
    """
    in_spec, out_spec = subscripts.replace(" ", "").split("->")
    spec_a, spec_b = in_spec.split(",")
    for name, spec, other in (("a", spec_a, spec_b), ("b", spec_b, spec_a)):
        if len(set(spec)) != len(spec):
            raise ValueError(f"repeated index in operand {name}: {subscripts}")
        if not set(spec) <= set(out_spec) | set(other):
            raise ValueError(f"dangling index in operand {name}: {subscripts}")
    if not (is_tensor(a) or is_tensor(b)):
        return np.einsum(subscripts, value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)

    def backward(g):
        if is_tensor(a):
            _accumulate(a, np.einsum(f"{out_spec},{spec_b}->{spec_a}", g, bv))
        if is_tensor(b):
            _accumulate(b, np.einsum(f"{out_spec},{spec_a}->{spec_b}", g, av))

    return _node(np.einsum(subscripts, av, bv), (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise functions
# ---------------------------------------------------------------------------

def _unary(x, fn, dfn):
    if not is_tensor(x):
        return fn(value_of(x))
    out_value = fn(x.value)

    def backward(g):
        _accumulate(x, g * dfn(x.value, out_value))

    return _node(out_value, (x,), backward)


def exp(x):
    return _unary(x, np.exp, lambda v, o: o)


def log(x):
    return _unary(x, np.log, lambda v, o: 1.0 / v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda v, o: 0.5 / o)


def square(x):
    return _unary(x, np.square, lambda v, o: 2.0 * v)


def power(x, exponent):
    if not isinstance(exponent, (int, float)):
        raise ValueError("power exponent must be a python scalar")
    return _unary(x, lambda v: v ** exponent,
                  lambda v, o: exponent * v ** (exponent - 1))


def absolute(x):
    return _unary(x, np.abs, lambda v, o: np.sign(v))


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64))


def leaky_relu(x, negative_slope=0.2):
    return _unary(x, lambda v: np.where(v > 0, v, negative_slope * v),
                  lambda v, o: np.where(v > 0, 1.0, negative_slope))


def elu(x):
    return _unary(x, lambda v: np.where(v > 0, v, np.expm1(v)),
                  lambda v, o: np.where(v > 0, 1.0, np.exp(v)))


# smooth rotation kernels: functions of t = theta^2 so they stay finite and
# differentiable at zero rotation.  Series branches cover t <= 1e-6 where the
# closed forms lose precision to cancellation.

def _sinc_sq_value(t):
    s = np.sqrt(np.maximum(t, 0.0))
    small = t <= 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = np.where(small, 1.0, np.sin(s) / np.where(small, 1.0, s))
    series = 1.0 - t / 6.0 + t * t / 120.0
    return np.where(small, series, direct)


def _sinc_sq_deriv(t):
    s = np.sqrt(np.maximum(t, 0.0))
    small = t <= 1e-6
    safe = np.where(small, 1.0, t)
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = (s * np.cos(s) - np.sin(s)) / (2.0 * safe * np.where(small, 1.0, s))
    series = -1.0 / 6.0 + t / 60.0
    return np.where(small, series, direct)


def sinc_sq(t):
    """sin(sqrt(t)) / sqrt(t), smooth through t = 0."""
    return _unary(t, _sinc_sq_value, lambda v, o: _sinc_sq_deriv(v))


def _cosc_sq_value(t):
    # 1 - cos(s) written as 2 sin^2(s/2): full relative precision at small s.
    s = np.sqrt(np.maximum(t, 0.0))
    small = t <= 1e-6
    safe = np.where(small, 1.0, t)
    half_sin = np.sin(0.5 * s)
    direct = 2.0 * half_sin * half_sin / safe
    series = 0.5 - t / 24.0 + t * t / 720.0
    return np.where(small, series, direct)


def _cosc_sq_deriv(t):
    # Direct numerator cancels to O(t^2); below t = 1e-3 the series is the
    # accurate branch (truncation ~1e-10 there, cancellation noise ~1e-4).
    s = np.sqrt(np.maximum(t, 0.0))
    small = t <= 1e-3
    safe = np.where(small, 1.0, t)
    direct = (0.5 * s * np.sin(s) - (1.0 - np.cos(s))) / (safe * safe)
    series = -1.0 / 24.0 + t / 360.0 - t * t / 13440.0
    return np.where(small, series, direct)


def cosc_sq(t):
    """(1 - cos(sqrt(t))) / t, smooth through t = 0."""
    return _unary(t, _cosc_sq_value, lambda v, o: _cosc_sq_deriv(v))


def _arc_over_sin_value(c):
    u = 1.0 - c
    small = u <= 1e-9
    cc = np.clip(c, -1.0 + 1e-12, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = np.arccos(cc) / np.sqrt(np.maximum(1.0 - cc * cc, 1e-300))
    series = 1.0 + u / 3.0 + 2.0 * u * u / 15.0
    return np.where(small, series, direct)


def _arc_over_sin_deriv(c, g_value):
    # c*g - 1 cancels to O(u); switch to the series well before roundoff
    # in the direct form becomes visible.
    u = 1.0 - c
    small = u <= 1e-6
    cc = np.clip(c, -1.0 + 1e-12, 1.0)
    denom = np.where(small, 1.0, 1.0 - cc * cc)
    direct = (cc * g_value - 1.0) / denom
    series = -1.0 / 3.0 - 4.0 * u / 15.0
    return np.where(small, series, direct)


def arc_over_sin(c):
    """arccos(c) / sqrt(1 - c^2): scales a cross product into a rotation vector.

    Only valid for c > -1 (no antipodal rotations); inputs are clipped a hair
    inside the domain, which is harmless for the small deformations used here.
    """
    return _unary(c, _arc_over_sin_value,
                  lambda v, o: _arc_over_sin_deriv(v, o))


# ---------------------------------------------------------------------------
# reductions, shaping, indexing
# ---------------------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    if not is_tensor(x):
        return np.sum(value_of(x), axis=axis, keepdims=keepdims)
    v = x.value

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, v.shape).copy())

    return _node(v.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    v = value_of(x)
    count = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return div(reduce_sum(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x, shape):
    if not is_tensor(x):
        return np.reshape(value_of(x), shape)
    old = x.value.shape

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _node(x.value.reshape(shape), (x,), backward)


def concat(parts, axis=0):
    if not any(is_tensor(p) for p in parts):
        return np.concatenate([value_of(p) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if is_tensor(part):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(part, g[tuple(index)])

    return _node(np.concatenate(values, axis=axis), tuple(parts), backward)


def take_rows(x, indices):
    """Gather rows (axis 0); repeated indices accumulate on backward."""
    idx = np.asarray(indices)
    if not is_tensor(x):
        return value_of(x)[idx]
    v = x.value

    def backward(g):
        grad = np.zeros_like(v)
        np.add.at(grad, idx, g)
        _accumulate(x, grad)

    return _node(v[idx], (x,), backward)


def take_axis(x, indices, axis):
    idx = np.asarray(indices)
    if not is_tensor(x):
        return np.take(value_of(x), idx, axis=axis)
    v = x.value

    def backward(g):
        grad = np.zeros_like(v)
        index = [slice(None)] * v.ndim
        index[axis] = idx
        np.add.at(grad, tuple(index), g)
        _accumulate(x, grad)

    return _node(np.take(v, idx, axis=axis), (x,), backward)


def slice_rows(x, start, stop):
    if not is_tensor(x):
        return value_of(x)[start:stop]
    v = x.value

    def backward(g):
        grad = np.zeros_like(v)
        grad[start:stop] = g
        _accumulate(x, grad)

    return _node(v[start:stop], (x,), backward)


def segment_sum(x, segment_ids, num_segments):
    """out[s] = sum of x rows whose segment id is s."""
    seg = np.asarray(segment_ids)
    if not is_tensor(x):
        v = value_of(x)
        out = np.zeros((num_segments,) + v.shape[1:], dtype=np.float64)
        np.add.at(out, seg, v)
        return out
    v = x.value
    out = np.zeros((num_segments,) + v.shape[1:], dtype=np.float64)
    np.add.at(out, seg, v)

    def backward(g):
        _accumulate(x, g[seg])

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# composed helpers
# ---------------------------------------------------------------------------

def softmax_rows(x):
    """Row softmax, stabilised by a detached per-row max."""
    shift = value_of(x).max(axis=-1, keepdims=True)
    e = exp(sub(x, shift))
    return div(e, reduce_sum(e, axis=-1, keepdims=True))


def row_normalize(x, snap_tol=1e-12):
    """Project rows onto the unit sphere.

    Rows already unit up to ``snap_tol`` pass through bitwise unchanged so
    that exactly-on-sphere inputs stay exact; the backward uses the same
    snapped scale, which only perturbs the Jacobian at O(snap_tol).
    """
    v = value_of(x)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < 0.5):
        raise ValueError("row_normalize: row norm below 0.5, geometry is degenerate")
    scale = np.where(np.abs(norms - 1.0) <= snap_tol, 1.0, 1.0 / norms)
    out_value = v * scale
    if not is_tensor(x):
        return out_value

    def backward(g):
        inner = np.sum(g * out_value, axis=-1, keepdims=True)
        _accumulate(x, (g - out_value * inner) * scale)

    return _node(out_value, (x,), backward)


def cross(a, b):
    """Row-wise cross product of (N, 3) operands, built from primitives."""
    def col(x, j):
        return take_axis(x, np.array([j]), axis=-1)

    a0, a1, a2 = col(a, 0), col(a, 1), col(a, 2)
    b0, b1, b2 = col(b, 0), col(b, 1), col(b, 2)
    return concat([
        sub(mul(a1, b2), mul(a2, b1)),
        sub(mul(a2, b0), mul(a0, b2)),
        sub(mul(a0, b1), mul(a1, b0)),
    ], axis=-1)

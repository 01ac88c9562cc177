"""Tape-based reverse-mode differentiation over numpy arrays.

Every node on a :class:`Tape` stores its operation kind, the ids of its
inputs, a forward rule (so the tape can be replayed) and a vector-Jacobian
rule used by the reverse sweep.  Node values are numpy arrays; a 0-d array
is a scalar node.  The hot path of the renderer uses a handful of fused
primitives (:func:`gather_weighted`, :func:`exclusive_cumprod`,
:func:`softmax`, :func:`bilinear_image`) instead of thousands of scalar
nodes.

>>> tape = Tape()
>>> x, y = tape.param(3.0), tape.param(5.0)
>>> g = grad(tape, x * y, [x, y])
>>> float(g[x.id]), float(g[y.id])
(5.0, 3.0)
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, StructuralError

__all__ = [
    "Tape", "Var", "grad", "finite_difference", "relative_error",
    "exp", "log", "sigmoid", "log_sigmoid", "softplus", "relu", "absolute",
    "sqrt", "square", "norm", "sum", "mean", "concat", "stack", "matmul",
    "minimum", "maximum", "clip_min", "where", "gather_weighted",
    "exclusive_cumprod", "softmax", "bilinear_image", "merge_gradients",
]


class Node:
    __slots__ = ("kind", "inputs", "forward", "backward")

    def __init__(self, kind, inputs, forward, backward):
        self.kind = kind
        self.inputs = inputs
        self.forward = forward
        self.backward = backward


class Tape:
    """Append-only record of a computation.

    ``dtype`` fixes the float width of parameters and lifted constants:
    float32 for fitting, float64 for gradient checks.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.visit_counts = None

    def __len__(self):
        return len(self.nodes)

    def param(self, value, name=None) -> "Var":
        value = np.array(value, dtype=self.dtype)
        return self._push(name or "leaf", (), value, None, None)

    def _push(self, kind, inputs, value, forward, backward) -> "Var":
        node_id = len(self.nodes)
        for i in inputs:
            if i >= node_id:
                raise StructuralError(f"input {i} does not precede node {node_id}")
        self.nodes.append(Node(kind, tuple(inputs), forward, backward))
        self.values.append(value)
        return Var(self, node_id)

    def _check_id(self, node_id):
        if not isinstance(node_id, (int, np.integer)) or not 0 <= node_id < len(self.nodes):
            raise StructuralError(f"unknown node id {node_id!r}")

    def replay(self, overrides=None):
        """Recompute every node value from the leaves.

        ``overrides`` maps leaf ids to replacement values.  Without
        overrides the result is bit-identical to the recorded values.
        """
        overrides = overrides or {}
        for k in overrides:
            self._check_id(k)
        values = []
        for i, node in enumerate(self.nodes):
            if node.forward is None:
                v = overrides.get(i, self.values[i])
                values.append(np.asarray(v, dtype=self.values[i].dtype))
            else:
                values.append(node.forward(*[values[j] for j in node.inputs]))
        return values


def _const(tape, x):
    x = np.asarray(x)
    if x.dtype.kind == "f" and x.dtype != tape.dtype:
        x = x.astype(tape.dtype)
    return x


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.tape.nodes[self.id].kind}, shape={self.shape})"

    def __add__(self, other):
        return _binary("add", self, other, np.add,
                       lambda g, a, b, out: g, lambda g, a, b, out: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, np.subtract,
                       lambda g, a, b, out: g, lambda g, a, b, out: -g)

    def __rsub__(self, other):
        return _binary("sub", other, self, np.subtract,
                       lambda g, a, b, out: g, lambda g, a, b, out: -g)

    def __mul__(self, other):
        return _binary("mul", self, other, np.multiply,
                       lambda g, a, b, out: g * b, lambda g, a, b, out: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other, np.divide,
                       lambda g, a, b, out: g / b, lambda g, a, b, out: -g * out / b)

    def __rtruediv__(self, other):
        return _binary("div", other, self, np.divide,
                       lambda g, a, b, out: g / b, lambda g, a, b, out: -g * out / b)

    def __neg__(self):
        return _unary("neg", self, np.negative, lambda g, x, out: -g)

    def __pow__(self, k):
        if isinstance(k, Var):
            raise TypeError("only constant exponents are supported")
        return _unary("pow", self, lambda x: x ** k, lambda g, x, out: g * k * x ** (k - 1))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _unary(kind, x: Var, f, df):
    return x.tape._push(kind, (x.id,), f(x.value), f,
                        lambda g, a, out: (df(g, a, out),))


def _binary(kind, a, b, f, da, db):
    if isinstance(a, Var) and isinstance(b, Var):
        if a.tape is not b.tape:
            raise StructuralError("operands live on different tapes")

        def backward(g, x, y, out):
            return (_unbroadcast(da(g, x, y, out), x.shape),
                    _unbroadcast(db(g, x, y, out), y.shape))

        return a.tape._push(kind, (a.id, b.id), f(a.value, b.value), f, backward)
    if isinstance(a, Var):
        c = _const(a.tape, b)
        return a.tape._push(
            kind, (a.id,), f(a.value, c), lambda x: f(x, c),
            lambda g, x, out: (_unbroadcast(da(g, x, c, out), x.shape),))
    if isinstance(b, Var):
        c = _const(b.tape, a)
        return b.tape._push(
            kind, (b.id,), f(c, b.value), lambda y: f(c, y),
            lambda g, y, out: (_unbroadcast(db(g, c, y, out), y.shape),))
    raise TypeError("at least one operand must be a Var")


def exp(x):
    return _unary("exp", x, np.exp, lambda g, a, out: g * out)


def log(x):
    return _unary("log", x, np.log, lambda g, a, out: g / a)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda g, a, out: g * out * (1.0 - out))


def log_sigmoid(x):
    """log(1 / (1 + e^-x)) without overflow for large |x|."""
    return _unary("log_sigmoid", x, lambda a: -np.logaddexp(0.0, -a).astype(a.dtype),
                  lambda g, a, out: g * _sigmoid(-a))


def softplus(x):
    return _unary("softplus", x, lambda a: np.logaddexp(0.0, a).astype(a.dtype),
                  lambda g, a, out: g * _sigmoid(a))


def relu(x):
    # subgradient 0 at the kink
    return _unary("relu", x, lambda a: np.maximum(a, 0.0),
                  lambda g, a, out: g * (a > 0))


def absolute(x):
    return _unary("abs", x, np.abs, lambda g, a, out: g * np.sign(a))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, a, out: g / (2.0 * out))


def square(x):
    return _unary("square", x, np.square, lambda g, a, out: 2.0 * g * a)


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; the gradient at the origin is 0."""

    def backward(g, a, out):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a,)

    f = lambda a: np.sqrt(np.sum(a * a, axis=axis))
    return x.tape._push("norm", (x.id,), f(x.value), f, backward)


def sum(x, axis=None, keepdims=False):
    f = lambda a: np.sum(a, axis=axis, keepdims=keepdims)

    def backward(g, a, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return x.tape._push("sum", (x.id,), f(x.value), f, backward)


def mean(x, axis=None, keepdims=False):
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x, index):
    basic = _is_basic(index)
    f = lambda a: a[index]

    def backward(g, a, out):
        full = np.zeros_like(a)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return x.tape._push("getitem", (x.id,), f(x.value), f, backward)


def reshape(x, shape):
    f = lambda a: a.reshape(shape)
    return x.tape._push("reshape", (x.id,), f(x.value), f,
                        lambda g, a, out: (g.reshape(a.shape),))


def concat(xs, axis=0):
    xs = list(xs)
    tape = xs[0].tape
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    f = lambda *vals: np.concatenate(vals, axis=axis)
    return tape._push("concat", tuple(x.id for x in xs), f(*[x.value for x in xs]), f,
                      lambda g, *rest: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis=-1):
    xs = list(xs)
    tape = xs[0].tape
    f = lambda *vals: np.stack(vals, axis=axis)
    n = len(xs)

    def backward(g, *rest):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return tape._push("stack", tuple(x.id for x in xs), f(*[x.value for x in xs]), f, backward)


def matmul(a, b):
    return _binary("matmul", a, b, np.matmul,
                   lambda g, x, y, out: g @ np.swapaxes(y, -1, -2),
                   lambda g, x, y, out: np.swapaxes(x, -1, -2) @ g)


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y, out: g * (x <= y), lambda g, x, y, out: g * (x > y))


def maximum(a, b):
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y, out: g * (x >= y), lambda g, x, y, out: g * (x < y))


def clip_min(x, lo):
    return _unary("clip_min", x, lambda a: np.maximum(a, lo),
                  lambda g, a, out: g * (a > lo))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _binary("where", a, b, lambda x, y: np.where(cond, x, y),
                   lambda g, x, y, out: np.where(cond, g, 0.0),
                   lambda g, x, y, out: np.where(cond, 0.0, g))


def gather_weighted(grid, index, weights):
    """Weighted sum of grid entries: ``out[n] = sum_k weights[n,k] * grid[index[n,k]]``.

    ``grid`` has shape ``(K,)`` or ``(K, C)``; ``index`` and ``weights``
    share a shape ``(..., J)``.  This one primitive covers trilinear and
    bilinear interpolation, their spatial derivatives and finite-difference
    stencils, since all are linear in the grid values.
    """
    index = np.asarray(index)
    weights = _const(grid.tape, weights)
    lead = index.shape[:-1]
    flat_idx = index.reshape(-1)

    def f(values):
        picked = values[index]
        if values.ndim == 1:
            return np.sum(picked * weights, axis=-1)
        return np.einsum("...j,...jc->...c", weights, picked)

    def backward(g, values, out):
        K = values.shape[0]
        if values.ndim == 1:
            contrib = (g[..., None] * weights).reshape(-1)
            return (np.bincount(flat_idx, contrib, minlength=K).astype(values.dtype),)
        C = values.shape[1]
        contrib = (weights[..., None] * g[..., None, :]).reshape(-1, C)
        cols = [np.bincount(flat_idx, contrib[:, c], minlength=K) for c in range(C)]
        return (np.stack(cols, axis=1).astype(values.dtype),)

    out = f(grid.value)
    assert out.shape[:len(lead)] == lead
    return grid.tape._push("gather_weighted", (grid.id,), out, f, backward)


def exclusive_cumprod(x):
    """Running products along the last axis, starting from 1.

    For ``x`` of shape ``(..., K)`` returns shape ``(..., K + 1)`` with
    ``out[..., m] = prod_{i<m} x[..., i]``.  The backward pass avoids
    dividing by ``x`` so zero factors are handled exactly.
    """

    def f(a):
        ones = np.ones(a.shape[:-1] + (1,), dtype=a.dtype)
        return np.concatenate([ones, np.cumprod(a, axis=-1)], axis=-1)

    def backward(g, a, out):
        K = a.shape[-1]
        # suffix[i] = sum_{m>i} g[m] * prod_{i<j<m} a[j]
        suffix = np.zeros(a.shape[:-1], dtype=np.result_type(g, a))
        grads = np.empty(a.shape, dtype=suffix.dtype)
        for i in range(K - 1, -1, -1):
            nxt = a[..., i + 1] if i + 1 < K else 0.0
            suffix = g[..., i + 1] + nxt * suffix
            grads[..., i] = out[..., i] * suffix
        return (grads,)

    return x.tape._push("exclusive_cumprod", (x.id,), f(x.value), f, backward)


def softmax(x, axis=-1):
    def f(a):
        z = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    def backward(g, a, out):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return x.tape._push("softmax", (x.id,), f(x.value), f, backward)


def bilinear_image(image, u, v):
    """Sample an ``H x W x C`` constant image at continuous pixel coords.

    ``u`` and ``v`` are Vars of equal shape; coordinates are clamped to the
    image so the caller must mask out-of-range samples.  Gradients flow to
    ``u`` and ``v`` only, through the four corner pixels.
    """
    image = _const(u.tape, image)
    H, W = image.shape[:2]

    def corners(uu, vv):
        uu = np.clip(uu, 0.0, W - 1.0)
        vv = np.clip(vv, 0.0, H - 1.0)
        u0 = np.minimum(np.floor(uu).astype(np.int64), W - 2)
        v0 = np.minimum(np.floor(vv).astype(np.int64), H - 2)
        return u0, v0, uu - u0, vv - v0

    def f(uu, vv):
        u0, v0, tu, tv = corners(uu, vv)
        i00, i01 = image[v0, u0], image[v0, u0 + 1]
        i10, i11 = image[v0 + 1, u0], image[v0 + 1, u0 + 1]
        tu, tv = tu[..., None], tv[..., None]
        return (1 - tv) * ((1 - tu) * i00 + tu * i01) + tv * ((1 - tu) * i10 + tu * i11)

    def backward(g, uu, vv, out):
        u0, v0, tu, tv = corners(uu, vv)
        inside_u = (uu >= 0) & (uu <= W - 1)
        inside_v = (vv >= 0) & (vv <= H - 1)
        i00, i01 = image[v0, u0], image[v0, u0 + 1]
        i10, i11 = image[v0 + 1, u0], image[v0 + 1, u0 + 1]
        tu_, tv_ = tu[..., None], tv[..., None]
        d_du = (1 - tv_) * (i01 - i00) + tv_ * (i11 - i10)
        d_dv = (1 - tu_) * (i10 - i00) + tu_ * (i11 - i01)
        return (np.sum(g * d_du, axis=-1) * inside_u, np.sum(g * d_dv, axis=-1) * inside_v)

    return u.tape._push("bilinear_image", (u.id, v.id), f(u.value, v.value), f, backward)


def grad(tape: Tape, output, params) -> dict:
    """d(output)/d(param) for each param, by one reverse sweep.

    ``output`` must be a scalar node.  Returns a dict keyed by node id;
    params the output does not depend on get a zero gradient.
    """
    out_id = output.id if isinstance(output, Var) else output
    tape._check_id(out_id)
    ids = []
    for p in params:
        pid = p.id if isinstance(p, Var) else p
        tape._check_id(pid)
        ids.append(int(pid))
    if tape.values[out_id].size != 1:
        raise StructuralError("grad() needs a scalar output node")

    adjoint = [None] * (out_id + 1)
    adjoint[out_id] = np.ones_like(tape.values[out_id])
    visits = np.zeros(out_id + 1, dtype=np.int64)
    for i in range(out_id, -1, -1):
        visits[i] += 1
        g = adjoint[i]
        node = tape.nodes[i]
        if g is None or node.backward is None:
            continue
        vals = [tape.values[j] for j in node.inputs]
        for j, gj in zip(node.inputs, node.backward(g, *vals, tape.values[i])):
            if gj is None:
                continue
            adjoint[j] = gj if adjoint[j] is None else adjoint[j] + gj
    tape.visit_counts = visits

    result = {}
    for pid in ids:
        g = adjoint[pid] if pid <= out_id else None
        result[pid] = np.zeros_like(tape.values[pid]) if g is None else np.asarray(g)
    return result


def merge_gradients(maps):
    """Sum gradient maps in the given order (fixed order keeps runs reproducible)."""
    total = {}
    for m in maps:
        for k, g in m.items():
            total[k] = g.copy() if k not in total else total[k] + g
    return total


def finite_difference(f, point, eps=1e-6):
    """Central-difference gradient of a scalar function of a vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.asarray(point, dtype=np.float64)
    flat = point.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        fh = float(f(hi.reshape(point.shape)))
        fl = float(f(lo.reshape(point.shape)))
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        out[i] = (fh - fl) / (2.0 * eps)
    return out.reshape(point.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)

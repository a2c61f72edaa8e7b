"""Minimal dense-tensor numerics with reverse-mode differentiation.

A Tensor wraps a float64 ndarray; operations build a tape of op records
and :func:`backward` replays it once in reverse topological order. The op
inventory is exactly what the forecaster and its losses need: matmul with
batch broadcasting, elementwise arithmetic and activations, reductions,
max/min against constants, and differentiable Gaussian density, CDF and
log-survival terms (the latter through a numerically stable complementary
path that never evaluates log(1 - CDF) directly).

Subgradient convention at kinks: relu, max and min take the derivative of
the active branch and 0 at exact ties. The censored pinball loss sits on
such a kink by construction, so this is pinned down by directed tests.

Allocation: every op output goes through :func:`_alloc`, which can draw
from a recycling buffer pool (see :func:`buffer_pool`). Training loops
recycle per batch, which keeps pages warm; this matters because fresh
large allocations fault in cold pages on every op, which dominates
runtime on some kernels. The pool is process-local and not thread-safe;
tapes are never shared across threads anyway. Pure forward evaluation
without the pool is thread-safe.
"""

from __future__ import annotations

import contextlib
import math
import os
import weakref
from math import prod as _prod

import numpy as np
from scipy.special import erfcx, log_ndtr, ndtr

from .errors import NumericalError, ValidationError

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)

# Debug-mode finite checks on every forward op (slow; used by tests).
CHECK_FINITE = bool(int(os.environ.get("LATENT_DEMAND_CHECK_FINITE", "0")))


def set_debug_checks(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


# -- buffer pool ------------------------------------------------------------


class _BufferPool:
    """Recycles float64 output buffers between recycle() calls.

    All buffers handed out since the last recycle() are considered live;
    recycle() returns them to the free lists, so callers must guarantee
    nothing outside the current tape still references them. The training
    loop recycles once per batch after the optimizer step.
    """

    __slots__ = ("enabled", "free", "issued")

    def __init__(self):
        self.enabled = False
        self.free: dict[int, list[np.ndarray]] = {}
        self.issued: list[np.ndarray] = []

    def alloc(self, shape) -> np.ndarray:
        size = _prod(shape) if shape else 1
        stack = self.free.get(size)
        if stack:
            buf = stack.pop()
        else:
            buf = np.empty(size, dtype=np.float64)
        self.issued.append(buf)
        return buf.reshape(shape)

    def recycle(self) -> None:
        for buf in self.issued:
            self.free.setdefault(buf.size, []).append(buf)
        self.issued.clear()

    def drop(self) -> None:
        self.free.clear()
        self.issued.clear()


_POOL = _BufferPool()


def _alloc(shape) -> np.ndarray:
    if _POOL.enabled:
        return _POOL.alloc(shape)
    return np.empty(shape, dtype=np.float64)


@contextlib.contextmanager
def buffer_pool():
    """Enable pooled op-output allocation for the duration of the block."""
    prev = _POOL.enabled
    _POOL.enabled = True
    try:
        yield _POOL
    finally:
        _POOL.enabled = prev
        if not prev:
            _POOL.drop()


def pool_recycle() -> None:
    """Return all pool buffers issued since the last call to the free lists.

    Only call between batches, when no tensor from the previous tape is
    still needed.
    """
    _POOL.recycle()


# -- tensors and the tape -----------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "op", "out_index",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad
        self.op = None
        self.out_index = 0

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, key):
        return take(self, key)


class _Op:
    # Outputs are weakrefs: tensors hold their op strongly, so strong
    # output refs would create reference cycles and put every tape node on
    # the cyclic garbage collector's plate, which dominates runtime at this
    # op granularity. An output nobody retains simply contributes no
    # gradient.
    __slots__ = ("name", "parents", "outputs", "backward_fn")

    def __init__(self, name, parents, backward_fn):
        self.name = name
        self.parents = parents
        self.outputs = []
        self.backward_fn = backward_fn


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(name, parents, values, backward_fn) -> list[Tensor]:
    """Create output tensors for one op; `values` is a list of ndarrays."""
    op = _Op(name, parents, backward_fn)
    needs = False
    for p in parents:
        if p.needs_grad:
            needs = True
            break
    outs = []
    for idx, val in enumerate(values):
        if CHECK_FINITE and not np.all(np.isfinite(val)):
            raise NumericalError(f"non-finite values produced by op {name!r}")
        t = Tensor(val)
        t.needs_grad = needs
        t.op = op
        t.out_index = idx
        outs.append(t)
    op.outputs = [weakref.ref(t) for t in outs]
    return outs


def _single(name, parents, value, backward_fn) -> Tensor:
    return _make(name, parents, [value], backward_fn)[0]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _out_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return np.broadcast_shapes(a.shape, b.shape)


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.add(a.data, b.data, out=_alloc(_out_shape(a.data, b.data)))

    def back(g):
        ga = _unbroadcast(g[0], a.data.shape) if a.needs_grad else None
        gb = _unbroadcast(g[0], b.data.shape) if b.needs_grad else None
        return ga, gb

    return _single("add", (a, b), out, back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.subtract(a.data, b.data, out=_alloc(_out_shape(a.data, b.data)))

    def back(g):
        ga = _unbroadcast(g[0], a.data.shape) if a.needs_grad else None
        gb = None
        if b.needs_grad:
            gb = _unbroadcast(np.negative(g[0], out=_alloc(g[0].shape)), b.data.shape)
        return ga, gb

    return _single("sub", (a, b), out, back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.multiply(a.data, b.data, out=_alloc(_out_shape(a.data, b.data)))

    def back(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(np.multiply(g[0], b.data, out=_alloc(_out_shape(g[0], b.data))),
                              a.data.shape)
        if b.needs_grad:
            gb = _unbroadcast(np.multiply(g[0], a.data, out=_alloc(_out_shape(g[0], a.data))),
                              b.data.shape)
        return ga, gb

    return _single("mul", (a, b), out, back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.divide(a.data, b.data, out=_alloc(_out_shape(a.data, b.data)))

    def back(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(np.divide(g[0], b.data, out=_alloc(_out_shape(g[0], b.data))),
                              a.data.shape)
        if b.needs_grad:
            tmp = np.multiply(g[0], out, out=_alloc(_out_shape(g[0], out)))
            np.divide(tmp, b.data, out=tmp)
            np.negative(tmp, out=tmp)
            gb = _unbroadcast(tmp, b.data.shape)
        return ga, gb

    return _single("div", (a, b), out, back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = np.negative(a.data, out=_alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        return (np.negative(g[0], out=_alloc(g[0].shape)),)

    return _single("neg", (a,), out, back)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = np.multiply(a.data, a.data, out=_alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        ga = np.multiply(g[0], a.data, out=_alloc(_out_shape(g[0], a.data)))
        np.multiply(ga, 2.0, out=ga)
        return (ga,)

    return _single("square", (a,), out, back)


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D x 2-D plus the two batched forms the model uses,
    each lowered to a single large GEMM instead of a loop of small ones."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValidationError(f"matmul needs >=2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValidationError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    if ad.ndim == 2 and bd.ndim == 2:
        out = np.matmul(ad, bd, out=_alloc((ad.shape[0], bd.shape[1])))

        def back(g):
            ga = np.matmul(g[0], bd.T, out=_alloc(ad.shape)) if a.needs_grad else None
            gb = np.matmul(ad.T, g[0], out=_alloc(bd.shape)) if b.needs_grad else None
            return ga, gb

        return _single("matmul", (a, b), out, back)

    if ad.ndim == 2 and bd.ndim == 3:
        # (i,j) x (B,j,f) -> (B,i,f): hoist the batch into GEMM columns via
        # node-major copies so the contraction is one large matrix product.
        batch, mid, feat = bd.shape
        rows = ad.shape[0]
        b_nodemajor = _alloc((mid, batch * feat))
        np.copyto(b_nodemajor.reshape(mid, batch, feat), bd.transpose(1, 0, 2))
        mixed = np.matmul(ad, b_nodemajor, out=_alloc((rows, batch * feat)))
        out = _alloc((batch, rows, feat))
        np.copyto(out, mixed.reshape(rows, batch, feat).transpose(1, 0, 2))

        def back(g):
            g_nodemajor = _alloc((rows, batch * feat))
            np.copyto(g_nodemajor.reshape(rows, batch, feat), g[0].transpose(1, 0, 2))
            ga = (np.matmul(g_nodemajor, b_nodemajor.T, out=_alloc(ad.shape))
                  if a.needs_grad else None)
            gb = None
            if b.needs_grad:
                gb_nodemajor = np.matmul(ad.T, g_nodemajor, out=_alloc((mid, batch * feat)))
                gb = _alloc(bd.shape)
                np.copyto(gb, gb_nodemajor.reshape(mid, batch, feat).transpose(1, 0, 2))
            return ga, gb

        return _single("matmul", (a, b), out, back)

    if ad.ndim == 3 and bd.ndim == 2:
        # (B,k,f) x (f,c) -> (B,k,c) via one folded GEMM
        batch, rows, inner = ad.shape
        cols = bd.shape[1]
        flat = np.ascontiguousarray(ad).reshape(batch * rows, inner)
        out = np.matmul(flat, bd, out=_alloc((batch * rows, cols))).reshape(batch, rows, cols)

        def back(g):
            gflat = np.ascontiguousarray(g[0]).reshape(batch * rows, cols)
            ga = (np.matmul(gflat, bd.T, out=_alloc((batch * rows, inner))).reshape(ad.shape)
                  if a.needs_grad else None)
            gb = np.matmul(flat.T, gflat, out=_alloc(bd.shape)) if b.needs_grad else None
            return ga, gb

        return _single("matmul", (a, b), out, back)

    def back(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(g[0] @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.needs_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g[0], bd.shape)
        return ga, gb

    return _single("matmul", (a, b), ad @ bd, back)


# -- activations ------------------------------------------------------------


def _sigmoid_into(x: np.ndarray, out: np.ndarray) -> np.ndarray:
    np.negative(x, out=out)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    np.add(out, 1.0, out=out)
    np.reciprocal(out, out=out)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_into(a.data, _alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        ga = np.subtract(1.0, out, out=_alloc(out.shape))
        np.multiply(ga, out, out=ga)
        np.multiply(ga, g[0], out=ga)
        return (ga,)

    return _single("sigmoid", (a,), out, back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data, out=_alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        ga = np.multiply(out, out, out=_alloc(out.shape))
        np.subtract(1.0, ga, out=ga)
        np.multiply(ga, g[0], out=ga)
        return (ga,)

    return _single("tanh", (a,), out, back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # derivative 0 at the kink
    out = np.maximum(a.data, 0.0, out=_alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        return (np.multiply(g[0], mask, out=_alloc(a.data.shape)),)

    return _single("relu", (a,), out, back)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) with the overflow-safe identity branch for x > 30."""
    a = as_tensor(a)
    out = np.minimum(a.data, 30.0, out=_alloc(a.data.shape))
    np.exp(out, out=out)
    np.log1p(out, out=out)
    big = a.data > 30.0
    if np.any(big):
        out[big] = a.data[big]

    def back(g):
        if not a.needs_grad:
            return (None,)
        ga = _sigmoid_into(a.data, _alloc(a.data.shape))
        np.multiply(ga, g[0], out=ga)
        return (ga,)

    return _single("softplus", (a,), out, back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data, out=_alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        return (np.multiply(g[0], out, out=_alloc(out.shape)),)

    return _single("exp", (a,), out, back)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data, out=_alloc(a.data.shape))

    def back(g):
        if not a.needs_grad:
            return (None,)
        return (np.divide(g[0], a.data, out=_alloc(a.data.shape)),)

    return _single("log", (a,), out, back)


# -- max / min ---------------------------------------------------------------


def maximum_const(a, const) -> Tensor:
    """Elementwise max against a constant; subgradient 1 where the variable
    wins, 0 where the constant wins and at exact ties."""
    a = as_tensor(a)
    c = np.asarray(const, dtype=np.float64)
    mask = a.data > c
    out = np.maximum(a.data, c, out=_alloc(_out_shape(a.data, c)))

    def back(g):
        if not a.needs_grad:
            return (None,)
        ga = np.multiply(g[0], mask, out=_alloc(_out_shape(g[0], mask)))
        return (_unbroadcast(ga, a.data.shape),)

    return _single("maximum_const", (a,), out, back)


def minimum_const(a, const) -> Tensor:
    """Elementwise min against a constant; same tie convention as max."""
    a = as_tensor(a)
    c = np.asarray(const, dtype=np.float64)
    mask = a.data < c
    out = np.minimum(a.data, c, out=_alloc(_out_shape(a.data, c)))

    def back(g):
        if not a.needs_grad:
            return (None,)
        ga = np.multiply(g[0], mask, out=_alloc(_out_shape(g[0], mask)))
        return (_unbroadcast(ga, a.data.shape),)

    return _single("minimum_const", (a,), out, back)


def maximum(a, b) -> Tensor:
    """Elementwise max of two tensors; ties get zero subgradient on both sides."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data, out=_alloc(_out_shape(a.data, b.data)))

    def back(g):
        ga = gb = None
        if a.needs_grad:
            ga = np.multiply(g[0], a.data > b.data, out=_alloc(out.shape))
            ga = _unbroadcast(ga, a.data.shape)
        if b.needs_grad:
            gb = np.multiply(g[0], b.data > a.data, out=_alloc(out.shape))
            gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return _single("maximum", (a, b), out, back)


# -- reductions & shaping -----------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if not a.needs_grad:
            return (None,)
        g0 = g[0]
        if axis is not None:
            g0 = np.expand_dims(g0, axis)
        ga = _alloc(a.data.shape)
        np.copyto(ga, g0)
        return (ga,)

    return _single("sum", (a,), out, back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def back(g):
        if not a.needs_grad:
            return (None,)
        g0 = g[0]
        if axis is not None:
            g0 = np.expand_dims(g0, axis)
        ga = _alloc(a.data.shape)
        np.divide(g0, count, out=ga)
        return (ga,)

    return _single("mean", (a,), out, back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        pieces = np.split(g[0], splits, axis=axis)
        return tuple(piece if t.needs_grad else None for piece, t in zip(pieces, tensors))

    return _single("concat", tuple(tensors), out, back)


def _contiguous_pooled(arr: np.ndarray) -> np.ndarray:
    if arr.flags.c_contiguous:
        return arr
    out = _alloc(arr.shape)
    np.copyto(out, arr)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _contiguous_pooled(a.data).reshape(shape)

    def back(g):
        if not a.needs_grad:
            return (None,)
        return (_contiguous_pooled(g[0]).reshape(a.data.shape),)

    return _single("reshape", (a,), out, back)


def take(a, key) -> Tensor:
    """Slicing/indexing with gradient scatter."""
    a = as_tensor(a)
    basic = isinstance(key, (int, slice)) or (
        isinstance(key, tuple) and all(isinstance(k, (int, slice, type(Ellipsis))) for k in key))

    def back(g):
        if not a.needs_grad:
            return (None,)
        full = _alloc(a.data.shape)
        full.fill(0.0)
        if basic:  # basic slices address each position at most once
            full[key] += g[0]
        else:
            np.add.at(full, key, g[0])
        return (full,)

    return _single("take", (a,), a.data[key], back)


def unstack_rows(a, n_steps: int) -> list[Tensor]:
    """Split a (batch*n_steps, ...) tensor into n_steps tensors of
    (batch, ...), where row b*n_steps + t belongs to step t. Outputs are
    views; one op node covers the whole split."""
    a = as_tensor(a)
    if a.data.shape[0] % n_steps:
        raise ValidationError(
            f"rows {a.data.shape[0]} not divisible by n_steps {n_steps}")
    views = [a.data[t::n_steps] for t in range(n_steps)]

    def back(gs):
        if not a.needs_grad:
            return (None,)
        full = _alloc(a.data.shape)
        for t, g in enumerate(gs):
            piece = full[t::n_steps]
            if g is None:
                piece.fill(0.0)
            else:
                np.copyto(piece, g)
        return (full,)

    return _make("unstack_rows", (a,), views, back)


# -- Gaussian terms -----------------------------------------------------------


def _check_sigma(sigma: Tensor) -> None:
    if np.any(sigma.data <= 0.0):
        raise ValidationError("sigma must be positive")


def gaussian_pdf(y, mu, sigma) -> Tensor:
    """Density of y under Normal(mu, sigma); y is data, mu and sigma are
    differentiable."""
    y = np.asarray(y, dtype=np.float64)
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _check_sigma(sigma)
    shape = np.broadcast_shapes(y.shape, mu.data.shape, sigma.data.shape)
    z = np.subtract(y, mu.data, out=_alloc(shape))
    np.divide(z, sigma.data, out=z)
    out = np.multiply(z, z, out=_alloc(shape))
    np.multiply(out, -0.5, out=out)
    np.exp(out, out=out)
    np.divide(out, sigma.data, out=out)
    np.divide(out, _SQRT_2PI, out=out)

    def back(g):
        gmu = gsig = None
        if mu.needs_grad:
            gmu = np.multiply(g[0], out, out=_alloc(shape))
            np.multiply(gmu, z, out=gmu)
            np.divide(gmu, sigma.data, out=gmu)
            gmu = _unbroadcast(gmu, mu.data.shape)
        if sigma.needs_grad:
            gsig = np.multiply(z, z, out=_alloc(shape))
            np.subtract(gsig, 1.0, out=gsig)
            np.multiply(gsig, out, out=gsig)
            np.multiply(gsig, g[0], out=gsig)
            np.divide(gsig, sigma.data, out=gsig)
            gsig = _unbroadcast(gsig, sigma.data.shape)
        return gmu, gsig

    return _single("gaussian_pdf", (mu, sigma), out, back)


def gaussian_cdf(y, mu, sigma) -> Tensor:
    """P(Y <= y) under Normal(mu, sigma), via the error function."""
    y = np.asarray(y, dtype=np.float64)
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _check_sigma(sigma)
    shape = np.broadcast_shapes(y.shape, mu.data.shape, sigma.data.shape)
    z = np.subtract(y, mu.data, out=_alloc(shape))
    np.divide(z, sigma.data, out=z)
    out = ndtr(z, out=_alloc(shape))
    pdf = np.multiply(z, z, out=_alloc(shape))
    np.multiply(pdf, -0.5, out=pdf)
    np.exp(pdf, out=pdf)
    np.divide(pdf, _SQRT_2PI, out=pdf)

    def back(g):
        gmu = gsig = None
        if mu.needs_grad:
            gmu = np.multiply(g[0], pdf, out=_alloc(shape))
            np.negative(gmu, out=gmu)
            np.divide(gmu, sigma.data, out=gmu)
            gmu = _unbroadcast(gmu, mu.data.shape)
        if sigma.needs_grad:
            gsig = np.multiply(g[0], pdf, out=_alloc(shape))
            np.multiply(gsig, z, out=gsig)
            np.negative(gsig, out=gsig)
            np.divide(gsig, sigma.data, out=gsig)
            gsig = _unbroadcast(gsig, sigma.data.shape)
        return gmu, gsig

    return _single("gaussian_cdf", (mu, sigma), out, back)


def log_survival(y, mu, sigma) -> Tensor:
    """log(1 - CDF(y)) under Normal(mu, sigma), computed as the log CDF of
    the reflected argument so it stays finite far into the tail. The
    gradient uses the scaled complementary error function, which is stable
    for any standardized residual."""
    y = np.asarray(y, dtype=np.float64)
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _check_sigma(sigma)
    shape = np.broadcast_shapes(y.shape, mu.data.shape, sigma.data.shape)
    z = np.subtract(y, mu.data, out=_alloc(shape))
    np.divide(z, sigma.data, out=z)
    neg_z = np.negative(z, out=_alloc(shape))
    out = log_ndtr(neg_z, out=neg_z)
    # hazard = pdf(z) / survival(z), stable in both tails
    hazard = np.multiply(z, _INV_SQRT2, out=_alloc(shape))
    erfcx(hazard, out=hazard)
    np.reciprocal(hazard, out=hazard)
    np.multiply(hazard, math.sqrt(2.0 / math.pi), out=hazard)

    def back(g):
        gmu = gsig = None
        if mu.needs_grad:
            gmu = np.multiply(g[0], hazard, out=_alloc(shape))
            np.divide(gmu, sigma.data, out=gmu)
            gmu = _unbroadcast(gmu, mu.data.shape)
        if sigma.needs_grad:
            gsig = np.multiply(g[0], hazard, out=_alloc(shape))
            np.multiply(gsig, z, out=gsig)
            np.divide(gsig, sigma.data, out=gsig)
            gsig = _unbroadcast(gsig, sigma.data.shape)
        return gmu, gsig

    return _single("log_survival", (mu, sigma), out, back)


# -- fused recurrent cell -------------------------------------------------------


def lstm_gates(acts_packed, c_prev) -> tuple[Tensor, Tensor]:
    """Gate nonlinearities and state update of one LSTM step as a single
    tape node: logistic input/forget/output gates, tanh candidate,
    cell = forget*old + input*candidate, hidden = output*tanh(cell).

    ``acts_packed`` holds the four gate pre-activations side by side as
    (rows, 4*hidden) columns ordered input/forget/output/candidate;
    ``c_prev`` is (rows, hidden). Returns (hidden, cell).
    """
    acts, c_prev = as_tensor(acts_packed), as_tensor(c_prev)
    rows, hidden = c_prev.data.shape
    if acts.data.shape != (rows, 4 * hidden):
        raise ValidationError(
            f"packed activations must be {(rows, 4 * hidden)}, got {acts.data.shape}")
    shape = (rows, hidden)
    c_prev_d = c_prev.data
    # One gate-major copy so all per-gate arithmetic runs on contiguous
    # blocks; column slices of the packed layout are badly strided.
    gate_major = _alloc((4, rows, hidden))
    np.copyto(gate_major, acts.data.reshape(rows, 4, hidden).transpose(1, 0, 2))
    # Logistic gates in one fused sweep over the first three blocks.
    sig_block = gate_major[:3]
    np.negative(sig_block, out=sig_block)
    with np.errstate(over="ignore"):
        np.exp(sig_block, out=sig_block)
    np.add(sig_block, 1.0, out=sig_block)
    np.reciprocal(sig_block, out=sig_block)
    gate_i, gate_f, gate_o = gate_major[0], gate_major[1], gate_major[2]
    cand = np.tanh(gate_major[3], out=gate_major[3])
    c_new = np.multiply(gate_f, c_prev_d, out=_alloc(shape))
    tmp = np.multiply(gate_i, cand, out=_alloc(shape))
    np.add(c_new, tmp, out=c_new)
    tanh_c = np.tanh(c_new, out=tmp)
    h_new = np.multiply(gate_o, tanh_c, out=_alloc(shape))

    def back(g):
        d_major = _alloc((4, rows, hidden))
        d_i, d_f, d_o, d_c = d_major[0], d_major[1], d_major[2], d_major[3]
        if g[0] is not None:
            # dc = grad_c + grad_h * gate_o * (1 - tanh_c^2)
            dc = np.multiply(tanh_c, tanh_c, out=_alloc(shape))
            np.subtract(1.0, dc, out=dc)
            np.multiply(dc, gate_o, out=dc)
            np.multiply(dc, g[0], out=dc)
            if g[1] is not None:
                np.add(dc, g[1], out=dc)
            # d_act_o = grad_h * tanh_c * gate_o * (1 - gate_o)
            np.subtract(1.0, gate_o, out=d_o)
            np.multiply(d_o, gate_o, out=d_o)
            np.multiply(d_o, tanh_c, out=d_o)
            np.multiply(d_o, g[0], out=d_o)
        else:
            dc = _alloc(shape)
            if g[1] is not None:
                np.copyto(dc, g[1])
            else:
                dc.fill(0.0)
            d_o.fill(0.0)
        np.subtract(1.0, gate_i, out=d_i)
        np.multiply(d_i, gate_i, out=d_i)
        np.multiply(d_i, cand, out=d_i)
        np.multiply(d_i, dc, out=d_i)
        np.subtract(1.0, gate_f, out=d_f)
        np.multiply(d_f, gate_f, out=d_f)
        np.multiply(d_f, c_prev_d, out=d_f)
        np.multiply(d_f, dc, out=d_f)
        np.multiply(cand, cand, out=d_c)
        np.subtract(1.0, d_c, out=d_c)
        np.multiply(d_c, gate_i, out=d_c)
        np.multiply(d_c, dc, out=d_c)
        dc_prev = np.multiply(dc, gate_f, out=dc) if c_prev.needs_grad else None
        d_acts = None
        if acts.needs_grad:
            d_acts = _alloc((rows, 4 * hidden))
            np.copyto(d_acts.reshape(rows, 4, hidden), d_major.transpose(1, 0, 2))
        return (d_acts, dc_prev)

    return tuple(_make("lstm_gates", (acts, c_prev), [h_new, c_new], back))


# -- reverse pass ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dt into .grad for every tensor that needs it.

    The loss must be scalar. Gradients of leaves that do not influence the
    loss stay None (treat as zero).
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    # Topological order over op records via iterative post-order DFS.
    order: list[_Op] = []
    seen: set[int] = set()
    if loss.op is not None:
        stack: list[tuple[_Op, int]] = [(loss.op, 0)]
        seen.add(id(loss.op))
        while stack:
            op, state = stack.pop()
            if state == 0:
                stack.append((op, 1))
                for p in op.parents:
                    if p.op is not None and id(p.op) not in seen and p.needs_grad:
                        seen.add(id(p.op))
                        stack.append((p.op, 0))
            else:
                order.append(op)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(order):
        outs = [ref() for ref in op.outputs]
        out_grads = [None if o is None else grads.get(id(o)) for o in outs]
        if all(g is None for g in out_grads):
            continue
        parent_grads = op.backward_fn(out_grads)
        for p, g in zip(op.parents, parent_grads):
            if g is None or not p.needs_grad:
                continue
            key = id(p)
            seen_grad = grads.get(key)
            if seen_grad is not None:
                grads[key] = np.add(seen_grad, g, out=_alloc(seen_grad.shape))
            else:
                grads[key] = g
        for out in outs:
            if out is None:
                continue
            grad = grads.pop(id(out), None)
            if grad is not None:
                out.grad = grad if out.grad is None else out.grad + grad
    for op in order:
        for p in op.parents:
            if p.op is None and p.requires_grad and id(p) in grads:
                g = grads.pop(id(p))
                p.grad = g if p.grad is None else p.grad + g

"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a :class:`Node` holding its parents and a
backward rule. Nodes carry a global creation sequence number, so the set of
nodes reachable from a loss, sorted by that number, is a valid topological
order: that sorted list is the :class:`ComputationTape` that
:func:`backward` replays in reverse.

Gradients of leaves accumulate across repeated ``backward`` calls until they
are reset (``t.grad = None`` or :func:`zero_grad`).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, DomainError, NumericError

_FLOATS = (np.float32, np.float64)
_seq = itertools.count()
_state = threading.local()
_check_finite = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle the NaN/Inf check run after every forward op. Returns the old value."""
    global _check_finite
    old, _check_finite = _check_finite, bool(enabled)
    return old


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    old = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = old


class Node:
    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional float32/float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOATS else np.float32
        dtype = np.dtype(dtype)
        if dtype not in _FLOATS:
            raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.asarray(data, dtype=dtype, order="C")
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, dtype=None, requires_grad=False):
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in _FLOATS:
        dtype = x.dtype
    return Tensor(np.asarray(x, dtype=dtype or np.float32), dtype=dtype)


def _make(op, out, parents, backward_fn):
    if _check_finite and not np.isfinite(np.add.reduce(out, axis=None)):
        if not np.isfinite(out).all():
            raise NumericError(f"non-finite value produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(out)
    t.grad = None
    t._node = None
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = track
    if track:
        t._node = Node(op, parents, backward_fn)
    return t


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise binary ----------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


# -- elementwise unary -----------------------------------------------------

def neg(x):
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def power(x, p):
    p = float(p)
    if p != int(p) and (x.data < 0).any():
        raise DomainError("fractional power of a negative value")
    out = x.data ** p
    return _make("pow", out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x):
    if (x.data <= 0).any():
        raise DomainError("log of a non-positive value")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    if (x.data < 0).any():
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def relu(x):
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,))


def sigmoid(x):
    out = special.expit(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1 - out * out),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make("gelu", out, (x,), backward)


def clamp(x, lo=None, hi=None):
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make("clamp", out, (x,), lambda g: (g * inside,))


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim if -ndim <= a < ndim else None for a in axis)
    if None in axes:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axes


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / count)


def softmax(x, axis=-1):
    """Max-subtracted softmax; output is non-negative and sums to one along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    e = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    out = e

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), backward)


# -- linear algebra and layout ----------------------------------------------

def matmul(a, b):
    """Matrix product, batched over leading axes like ``numpy.matmul``."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), backward)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def axis_linear_map(x, mats):
    """Apply a dense linear map along each listed axis.

    ``mats`` maps axis -> matrix of shape ``(out_extent, in_extent)``. Used by
    every interpolation in the engine; the backward rule applies transposes.
    """
    items = sorted(mats.items())
    for ax, m in items:
        if m.shape[1] != x.shape[ax]:
            raise DimensionError(f"axis {ax}: map expects extent {m.shape[1]}, tensor has {x.shape[ax]}")
    mats_c = [(ax, np.asarray(m, dtype=x.dtype)) for ax, m in items]
    out = x.data
    for ax, m in mats_c:
        out = _apply_axis(out, m, ax)

    def backward(g):
        for ax, m in reversed(mats_c):
            g = _apply_axis(g, m.T, ax)
        return (g,)

    return _make("axis_linear_map", np.ascontiguousarray(out), (x,), backward)


def _apply_axis(arr, m, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ m.T, -1, axis)


# -- convolution -----------------------------------------------------------

def _triple(v, name):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"{name} must be an int or 3 values")
    return v


def conv_output_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation of ``x[C_in, D, H, W]`` with ``weight[C_out, C_in, kd, kh, kw]``."""
    from . import _kernels

    if x.ndim != 4 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects x[C,D,H,W] and w[Co,Ci,kd,kh,kw], got {x.shape}, {weight.shape}")
    cin = x.shape[0]
    cout, wcin, kd, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv3d: input has {cin} channels, kernel expects {wcin}")
    st = _triple(stride, "stride")
    pd = _triple(padding, "padding")
    if min(st) < 1 or min(pd) < 0:
        raise DimensionError("conv3d: stride must be >= 1 and padding >= 0")
    ks = (kd, kh, kw)
    outsz = []
    for ax, (n, k, s, p) in enumerate(zip(x.shape[1:], ks, st, pd)):
        if n + 2 * p < k:
            raise DimensionError(f"conv3d: axis {ax + 1} extent {n} + 2*{p} is smaller than kernel {k}")
        outsz.append(conv_output_extent(n, k, s, p))
    do, ho, wo = outsz
    xl = np.ascontiguousarray(x.data.transpose(1, 2, 3, 0))
    if any(pd):
        xl = np.pad(xl, ((pd[0], pd[0]), (pd[1], pd[1]), (pd[2], pd[2]), (0, 0)))
    padded = xl.shape
    if ks == (1, 1, 1) and st == (1, 1, 1):
        cols = xl.reshape(-1, cin)
    else:
        cols = _kernels.im2col(xl, kd, kh, kw, *st)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 4, 1)).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.T).reshape(cout, do, ho, wo)

    def backward(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols).reshape(cout, kd, kh, kw, cin).transpose(0, 4, 1, 2, 3)
        gcols = np.ascontiguousarray(g2.T) @ wmat
        if ks == (1, 1, 1) and st == (1, 1, 1):
            gxl = gcols.reshape(padded)
        else:
            gxl = _kernels.col2im(gcols, *padded, kd, kh, kw, *st)
        gxl = gxl[pd[0]:padded[0] - pd[0], pd[1]:padded[1] - pd[1], pd[2]:padded[2] - pd[2]]
        gx = np.ascontiguousarray(gxl.transpose(3, 0, 1, 2))
        grads = [gx, np.ascontiguousarray(gw)]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv3d", y, parents, backward)


# -- resampling --------------------------------------------------------------

def linear_interp_matrix(coords, n_in):
    """Row k holds the linear-interpolation weights for fractional input ``coords[k]``.

    Coordinates are clamped to ``[0, n_in - 1]`` so no read falls outside the
    axis. Integer coordinates produce exact one-hot rows.
    """
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n_in - 1)
    i0 = np.floor(c).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = c - i0
    m = np.zeros((len(c), n_in))
    rows = np.arange(len(c))
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def align_corners_coords(n_in, n_out):
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_matrix(n_in, n_out):
    return linear_interp_matrix(align_corners_coords(n_in, n_out), n_in)


def trilinear_resize(x, out_shape):
    """Align-corners trilinear resize of ``x[C, D, H, W]`` to spatial ``out_shape``."""
    out_shape = tuple(int(s) for s in out_shape)
    if x.ndim != 4 or len(out_shape) != 3:
        raise DimensionError(f"trilinear_resize expects x[C,D,H,W] and 3 output extents, got {x.shape}, {out_shape}")
    if min(out_shape) < 1:
        raise DimensionError(f"trilinear_resize: output extents must be >= 1, got {out_shape}")
    mats = {ax + 1: resize_matrix(x.shape[ax + 1], n)
            for ax, n in enumerate(out_shape) if n != x.shape[ax + 1]}
    if not mats:
        return x
    return axis_linear_map(x, mats)


# -- backward ----------------------------------------------------------------

class ComputationTape:
    """Recorded ops reachable from ``root``, in topological (recording) order."""

    def __init__(self, root):
        seen = set()
        stack = [root]
        entries = []
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append(t)
            stack.extend(p for p in t._node.parents if p.requires_grad)
        entries.sort(key=lambda t: t._node.seq)
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def ops(self):
        return [t._node.op for t in self.entries]

    def run_backward(self, root, seed):
        pending = {id(root): seed}
        for t in reversed(self.entries):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            for p, pg in zip(node.parents, node.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    pg = np.asarray(pg, dtype=p.dtype)
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    ComputationTape(loss).run_backward(loss, seed)


def zero_grad(params):
    for p in params:
        p.grad = None

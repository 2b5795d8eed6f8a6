"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation below records its inputs and a backward closure on the output
tensor. Calling :func:`backward` on a scalar walks the recorded graph in the
reverse order of forward execution and accumulates ``.grad`` on every leaf
that requires it.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "relu",
    "exp",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "max",
    "concat",
    "gather",
    "norm",
    "minmax_normalize",
    "standardize",
    "affine_standardize",
    "segment_max",
    "reshape",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()
_counter = itertools.count()
_default_dtype = np.float64


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional array that optionally participates in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis):
        return max(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward_fn):
    """Wrap ``data`` and record ``backward_fn`` if any parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape / backward


class Tape:
    """Operations reachable from ``output``, ordered as they were executed."""

    def __init__(self, output):
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        self.nodes = nodes
        self.output = output

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def run_backward(self, seed=None):
        out = self.output
        grads = {id(out): np.ones_like(out.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    Tape(loss).run_backward()


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw)


def relu(x):
    y = np.maximum(x.data, 0)
    return _result(y, (x,), lambda g: (g * (y > 0),))


def exp(x):
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def _index(x, key):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    return _result(x.data[key], (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None):
    """Affine map over the last axis; leading axes broadcast."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects last dim {weight.shape[0]}, got input {x.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y += bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    return axis % ndim


def sum(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _first_argext(data, axis, fn):
    # index of the first extremal element along ``axis``, kept as a length-1 axis
    return np.expand_dims(fn(data, axis=axis), axis)


def max(x, axis):
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = _norm_axis(axis, x.ndim)
    arg = _first_argext(x.data, axis, np.argmax)
    out = np.take_along_axis(x.data, arg, axis=axis)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.squeeze(out, axis), (x,), bw)


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; zero vectors get a zero gradient."""
    axis = _norm_axis(axis, x.ndim)
    n = np.sqrt((x.data * x.data).sum(axis=axis))
    xd = x.data

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (xd * np.expand_dims(scale, axis),)

    return _result(n, (x,), bw)


def minmax_normalize(x, axis):
    """Rescale each slice along ``axis`` to [0, 1].

    Slices whose maximum equals their minimum map to all zeros.
    """
    axis = _norm_axis(axis, x.ndim)
    xd = x.data
    amin = _first_argext(xd, axis, np.argmin)
    amax = _first_argext(xd, axis, np.argmax)
    lo = np.take_along_axis(xd, amin, axis=axis)
    hi = np.take_along_axis(xd, amax, axis=axis)
    span = hi - lo
    flat = span == 0
    inv = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, span))
    y = (xd - lo) * inv

    def bw(g):
        gx = g * inv
        to_lo = np.sum(g * (y - 1.0), axis=axis, keepdims=True) * inv
        to_hi = -np.sum(g * y, axis=axis, keepdims=True) * inv
        np.put_along_axis(gx, amin, np.take_along_axis(gx, amin, axis=axis) + to_lo, axis=axis)
        np.put_along_axis(gx, amax, np.take_along_axis(gx, amax, axis=axis) + to_hi, axis=axis)
        return (gx,)

    return _result(y, (x,), bw)


def softmax(x, axis=-1):
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x, axis=-1):
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw)


def standardize(x, eps=1e-5):
    """Zero-mean, unit-variance per channel (last axis) over all other axes."""
    c = x.shape[-1]
    xd = x.data.reshape(-1, c)
    n = xd.shape[0]
    mu = xd.mean(axis=0)
    centered = xd - mu
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    shape = x.shape

    def bw(g):
        g2 = g.reshape(-1, c)
        gsum = g2.sum(axis=0)
        gdot = (g2 * xhat).sum(axis=0)
        gx = (inv_std / n) * (n * g2 - gsum - xhat * gdot)
        return (gx.reshape(shape),)

    return _result(xhat.reshape(shape), (x,), bw)


def affine_standardize(x, scale, shift, eps=1e-5):
    """``standardize(x) * scale + shift`` as a single recorded operation."""
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    xd = x.data.reshape(-1, c)
    n = xd.shape[0]
    centered = xd - xd.mean(axis=0)
    var = np.einsum("ij,ij->j", centered, centered) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    sd = scale.data
    shape = x.shape

    def bw(g):
        g2 = g.reshape(-1, c)
        gsum = g2.sum(axis=0)
        gdot = np.einsum("ij,ij->j", g2, xhat)
        gx = None
        if x.requires_grad:
            k = sd * inv_std / n
            gx = (k * (n * g2 - gsum - xhat * gdot)).reshape(shape)
        return gx, gdot, gsum

    return _result((xhat * sd + shift.data).reshape(shape), (x, scale, shift), bw)


# ---------------------------------------------------------------------------
# structural


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def gather(x, index):
    """Rows of ``x`` selected by an integer array of any shape.

    The result has shape ``index.shape + x.shape[1:]``.
    """
    index = np.asarray(index)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    rest = x.shape[1:]
    flat = index.reshape(-1)

    def bw(g):
        g2 = g.reshape(flat.size, -1)
        out = np.empty((n, g2.shape[1]), dtype=g.dtype)
        # bincount per column is much faster than np.add.at for this layout
        for col in range(g2.shape[1]):
            out[:, col] = np.bincount(flat, weights=g2[:, col], minlength=n)
        return (out.reshape((n,) + rest),)

    return _result(x.data[index], (x,), bw)


def segment_max(x, segment_ids, num_segments):
    """Per-segment maximum over rows of a 2-D tensor.

    Every segment id in ``[0, num_segments)`` must occur at least once. The
    gradient of each output entry flows to the first row (in row order) that
    attains the maximum.
    """
    segment_ids = np.asarray(segment_ids)
    if segment_ids.shape[0] != x.shape[0]:
        raise ShapeError(f"{segment_ids.shape[0]} segment ids for {x.shape[0]} rows")
    order = np.argsort(segment_ids, kind="stable")
    sorted_ids = segment_ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    if len(starts) != num_segments:
        raise ValueError("every segment must have at least one member")
    xs = x.data[order]
    out = np.maximum.reduceat(xs, starts, axis=0)
    hit = (xs == out[sorted_ids]) | np.isnan(xs)  # maximum propagates nan
    pos = np.where(hit, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(pos, starts, axis=0)
    winner = order[first]  # (num_segments, C) source rows
    n, c = x.shape

    def bw(g):
        full = np.zeros((n, c), dtype=g.dtype)
        full[winner, np.arange(c)[None, :]] = g
        return (full,)

    return _result(out, (x,), bw)

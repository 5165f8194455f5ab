"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array (float32 by default, float64
for gradient checking). Every differentiable op records its parents and a
closure mapping the output gradient to parent gradients; :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""

from contextlib import contextmanager

import numpy as np

LEAKY_SLOPE = 0.01

_grad_enabled = True
_debug_checks = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextmanager
def no_grad():
    """Build no graph inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag):
    """Toggle the NaN/Inf check on every op output."""
    global _debug_checks
    _debug_checks = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float32
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # graph -----------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
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

    # operators -------------------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data, parents, backward):
    """Wrap an op result, attaching the graph node only when needed."""
    if _debug_checks and not np.all(np.isfinite(data) | np.isneginf(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _coerce(a, b):
    ref = a if isinstance(a, Tensor) else b
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=ref.dtype), dtype=ref.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=ref.dtype), dtype=ref.dtype)
    return a, b


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _coerce(a, b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = _coerce(a, b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    """Elementwise product with trailing-dim broadcasting (covers broadcast-mul)."""
    a, b = _coerce(a, b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def scale(a, factor):
    f = a.dtype.type(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,))


def leaky_relu(x, slope=LEAKY_SLOPE):
    s = x.dtype.type(slope)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * s)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * s),))


def square(x):
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x):
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),))


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g),))


# linear algebra ---------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading dims (if any) are batch dims and must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return _make(np.matmul(ad, bd), (a, b), backward)


def softmax(x, axis=-1):
    """Softmax along ``axis``; -inf entries map to 0, an all -inf slice to all zeros."""
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    dead = np.isneginf(m)
    shifted = xd - np.where(dead, 0, m)
    e = np.exp(shifted)
    denom = np.sum(e, axis=axis, keepdims=True)
    out = np.where(dead, 0, e / np.where(dead, 1, denom)).astype(xd.dtype, copy=False)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


# reductions -------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def reduce_max(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    m = np.max(xd, axis=axes, keepdims=True)
    hit = xd == m
    # split the gradient evenly across tied maxima
    count = np.sum(hit, axis=axes, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.where(hit, g / count, 0).astype(xd.dtype),)

    return _make(np.asarray(out), (x,), backward)


# shape ops ----------------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def permute(x, axes):
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    ndim = tensors[0].ndim
    ax = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat operands disagree off the concat axis")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_(x, idx):
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), backward)

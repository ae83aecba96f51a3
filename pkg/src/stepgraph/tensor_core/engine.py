"""Reverse-mode automatic differentiation over numpy arrays.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. Node ids come from a global counter, so
sorting reachable nodes by descending id is a valid reverse topological
order and makes backward passes deterministic.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def backward(self, params=None):
        backward(self, params)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_ids)
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("power: only constant exponents are supported")
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


# -- elementwise unary -----------------------------------------------------
def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / y,))


def abs_(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo, hi):
    """Clamp values; gradient is zero where clamping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions ------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum_(a, axes, keepdims) * (1.0 / count)


# -- shape manipulation ----------------------------------------------------
def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort([ax % a.ndim for ax in axes])
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index):
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def take(weight, indices):
    """Embedding lookup: rows of ``weight`` selected by integer ``indices``."""
    indices = np.asarray(indices, dtype=np.intp)
    if weight.ndim != 2:
        raise ShapeError(f"take: weight must be 2-D, got {weight.shape}")
    return getitem(weight, indices)


def take_along_axis(a, indices, axis):
    """Gather slices along ``axis`` using per-batch integer indices.

    ``indices`` has the shape of ``a`` with ``axis`` replaced by the number
    of gathered positions, except that trailing axes after ``axis`` may be
    omitted and are broadcast.
    """
    axis = axis % a.ndim
    idx = np.asarray(indices, dtype=np.intp)
    while idx.ndim < a.ndim:
        idx = idx[..., None]
    target = list(a.shape)
    target[axis] = idx.shape[axis]
    idx = np.broadcast_to(idx, target)
    out = np.take_along_axis(a.data, idx, axis=axis)

    srt = np.sort(np.moveaxis(idx, axis, -1), axis=-1)
    unique = not np.any(srt[..., 1:] == srt[..., :-1])

    def bw(g):
        full = np.zeros_like(a.data)
        if unique:
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[axis] = idx
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: shapes {shapes} do not match along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# -- composite primitives with fused backward --------------------------------
def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


VAR_FLOOR = 1e-12


def layer_norm(a, gamma=None, beta=None, var_floor=VAR_FLOOR):
    """Normalize over the last axis. Variance is floored, so constant rows map to zeros."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var < var_floor
    std = np.sqrt(np.maximum(var, var_floor))
    xhat = xc / std

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        proj = np.where(floored, 0.0, gx.mean(axis=-1, keepdims=True))
        return ((g - gm - xhat * proj) / std,)

    out = _make(xhat, (a,), bw)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def conv1d(x, weight, bias=None, stride=1, dilation=1):
    """Valid 1-D convolution. x: (B, C_in, T); weight: (C_out, C_in, K)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    _, _, T = x.shape
    K = weight.shape[2]
    span = dilation * (K - 1) + 1
    if T < span:
        raise ShapeError(f"conv1d: input length {T} shorter than receptive field {span}")
    T_out = (T - span) // stride + 1
    stop = stride * (T_out - 1) + 1
    taps = [slice(k * dilation, k * dilation + stop, stride) for k in range(K)]
    out = np.zeros((x.shape[0], weight.shape[0], T_out))
    for k, sl in enumerate(taps):
        out += np.einsum("oc,bct->bot", weight.data[:, :, k], x.data[:, :, sl], optimize=True)

    def bw(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for k, sl in enumerate(taps):
            gx[:, :, sl] += np.einsum("oc,bot->bct", weight.data[:, :, k], g, optimize=True)
            gw[:, :, k] = np.einsum("bot,bct->oc", g, x.data[:, :, sl], optimize=True)
        return gx, gw

    res = _make(out, (x, weight), bw)
    if bias is not None:
        res = res + reshape(bias, (1, -1, 1))
    return res


# -- backward --------------------------------------------------------------
def backward(loss, params=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves in ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar-shaped, got {loss.shape}")
    nodes = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        stack_.extend(node._parents)

    grads = {loss.id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    loss.grad = np.ones_like(loss.data)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

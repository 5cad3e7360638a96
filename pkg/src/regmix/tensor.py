"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the primitives needed by the models, attacks and losses are provided.
Broadcasting is restricted to singleton-dimension expansion (numpy rules
after left-padding the shorter shape with ones).
"""
from __future__ import annotations

import numpy as np

from regmix import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    """A value node in the gradient graph.

    ``data`` is always a float64 ndarray. Leaves created with
    ``requires_grad=True`` accumulate gradients into ``grad`` on every
    :meth:`backward` call until :meth:`zero_grad` is invoked.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        # float64 arrays are adopted without copying; everything else is converted
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    @property
    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        backward(self, seed)

    # operator sugar
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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _broadcast_shape(a, b):
    sa, sb = a.shape, b.shape
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + tuple(sa)
    pb = (1,) * (n - len(sb)) + tuple(sb)
    out = []
    for da, db in zip(pa, pb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"shapes {list(sa)} and {list(sb)} are not broadcast-compatible")
    return tuple(out)


def _unbroadcast(grad, shape):
    """Sum ``grad`` over the axes that were expanded to reach its shape."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError(f"division by a tensor containing zero (divisor shape {list(b.shape)})")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, lo):
    """max(a, lo) with the gradient routed only through unclamped entries."""
    a = as_tensor(a)
    mask = a.data >= lo
    return _node(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------- reductions

def _check_axis(a, axis):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for shape {list(a.shape)}")
    return axis % a.ndim


def tsum(a, axis=None):
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def amax(a, axis):
    """Maximum along ``axis``; gradient goes to the first maximiser."""
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _node(out, (a,), bw, "amax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis))


def pick(a, index):
    """Select ``a[i, index[i]]`` for a 2-D tensor; returns shape (N,)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick needs a 2-D tensor and one index per row, got {list(a.shape)} "
                         f"and {list(index.shape)}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _node(out, (a,), bw, "pick")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flat_slice(a, start, stop, shape):
    """View ``a[start:stop]`` of a 1-D tensor reshaped to ``shape``."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"flat_slice needs a 1-D tensor, got {list(a.shape)}")
    out = a.data[start:stop].reshape(shape)

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g.reshape(-1)
        return (full,)

    return _node(out, (a,), bw, "flat_slice")


def detach(a):
    """Same values, cut from the gradient graph."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), op="detach")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {list(a.shape)} @ {list(b.shape)}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bw, "matmul")


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {list(x.shape)} and {list(kernel.shape)}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {list(x.shape)}, kernel {list(kernel.shape)}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)
    wmat = kernel.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, oh, ow)

    def bw(g):
        g2 = g.reshape(n, o, oh * ow)
        gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = kernels.col2im(np.ascontiguousarray(gcols), c, hp, wp, kh, kw, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _node(out, (x, kernel), bw, "conv2d")


# ---------------------------------------------------------------- backward

class GradTape:
    """Reverse-topological ordering of the graph feeding a loss node."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        order.reverse()  # consumers before producers
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss, seed=None):
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    tape = GradTape.record(loss)
    grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
             .reshape(loss.shape)}
    for node in tape.nodes:
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
            grads[key] = pg if key not in grads else grads[key] + pg

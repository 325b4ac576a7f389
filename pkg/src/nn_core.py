#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Define-by-run automatic differentiation over dense float64 numpy arrays.
# Every operation returns a new Tensor holding its parents and a closure that
# maps the output gradient to one gradient per parent; backward() replays the
# recorded trace in reverse topological order.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.utils import ShapeError, TrainingDivergedError

#===============================================================================
# Tensor
#===============================================================================
class Tensor:
    # ndarray operators defer to ours so `array * tensor` stays on the trace.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._op = _op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)

def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)

def _result(data, parents, op, grad_fn):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 _parents=tuple(parents), _op=op)
    if out.requires_grad:
        out._backward = grad_fn
    return out

# Sum a broadcast gradient back down to the operand's shape.
def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

#===============================================================================
# Reverse pass
#===============================================================================
def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order

def backward(root):
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not np.all(np.isfinite(root.data)):
        raise TrainingDivergedError(f"non-finite loss value {root.data.reshape(-1)[0]}")
    root.grad = np.ones_like(root.data)
    for node in reversed(_topological_order(root)):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"non-finite gradient through '{node._op}'")
            parent.grad = grad.copy() if parent.grad is None else parent.grad + grad

#===============================================================================
# Elementwise arithmetic
#===============================================================================
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, (a, b), "div",
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / b.data ** 2, b.shape)))

def neg(a):
    return _result(-a.data, (a,), "neg", lambda g: (-g,))

def power(a, exponent):
    exponent = float(exponent)
    return _result(a.data ** exponent, (a,), "pow",
                   lambda g: (g * exponent * a.data ** (exponent - 1.0),))

def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))

def log(a):
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))

def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))

def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out ** 2),))

def sigmoid(a):
    out = expit(a.data)
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))

# Also serves as the hinge max(x, 0) of the outage penalty.
def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), "relu", lambda g: (g * mask,))

#===============================================================================
# Reductions and linear algebra
#===============================================================================
def tsum(a, axis=None, keepdims=False):
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", grad_fn)

def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(tsum(a, axis, keepdims), float(count))

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(a.data @ b.data, (a, b), "matmul", grad_fn)

#===============================================================================
# Relayouts and indexing
#===============================================================================
def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from e
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))

def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))

def getitem(a, index):
    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _result(a.data[index], (a,), "getitem", grad_fn)

def take_along_axis(a, indices, axis):
    indices = np.asarray(indices)
    def grad_fn(g):
        full = np.zeros_like(a.data)
        grid = list(np.indices(indices.shape, sparse=True))
        grid[axis] = indices
        np.add.at(full, tuple(grid), g)
        return (full,)
    return _result(np.take_along_axis(a.data, indices, axis), (a,), "take", grad_fn)

def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat",
                   lambda g: tuple(np.split(g, splits, axis=axis)))

def stack(tensors, axis=0):
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)

#===============================================================================
# Convolution and pooling
#===============================================================================
# Cross-correlation, stride 1. x: (B, C, H, W), weight: (O, C, kh, kw).
def conv2d(x, weight, bias=None, padding=(0, 0)):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    ph, pw = padding
    kh, kw = weight.shape[2:]
    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {padded.shape[2:]}")
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    ho, wo = out.shape[2:]

    def grad_fn(g):
        gw = np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)
        gx = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j])
        gx = gx[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    return _result(out, parents, "conv2d", grad_fn)

# Non-overlapping windows (stride = pool). Trailing rows/cols that do not fill
# a window are dropped.
def maxpool2d(x, pool=(2, 1)):
    ph, pw = pool
    b, c, h, w = x.shape
    ho, wo = h // ph, w // pw
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool {pool} larger than input {x.shape[2:]}")
    blocks = (x.data[:, :, :ho * ph, :wo * pw]
              .reshape(b, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, ho, wo, ph * pw))
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def grad_fn(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, arg, g[..., None], axis=-1)
        routed = (routed.reshape(b, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
                  .reshape(b, c, ho * ph, wo * pw))
        full = np.zeros_like(x.data)
        full[:, :, :ho * ph, :wo * pw] = routed
        return (full,)
    return _result(out, (x,), "maxpool2d", grad_fn)

#===============================================================================
# Gradient checking
#===============================================================================
"""Central-difference gradient of the scalar fn() with respect to tensor.data."""
def finite_difference_grad(fn, tensor, h=1e-6):
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(fn().data.reshape(-1)[0])
        flat[i] = original - h
        minus = float(fn().data.reshape(-1)[0])
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad

def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))

"""Differentiable operations.

Each op computes its value with numpy and, when any input requires a
gradient, attaches a closure mapping the output gradient to one gradient per
input. Broadcasting is limited to a trailing-suffix rule (bias vectors,
scalars); anything else is a :class:`ShapeError`.
"""

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_node


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _suffix_broadcast(op, a, b):
    """Return the number of leading axes b is broadcast over (None if a is)."""
    if a.shape == b.shape:
        return 0
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.ndim - b.ndim
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, lead):
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b):
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    if b.ndim > a.ndim:
        a, b = b, a
    lead = _suffix_broadcast("add", a, b)

    def back(g):
        return g, _reduce_to(g, lead)

    return make_node(a.data + b.data, "add", (a, b), back)


def subtract(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    lead = _suffix_broadcast("subtract", a, b)

    def back(g):
        return g, -_reduce_to(g, lead)

    return make_node(a.data - b.data, "subtract", (a, b), back)


def multiply(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    lead = _suffix_broadcast("multiply", a, b)

    def back(g):
        return g * b.data, _reduce_to(g * a.data, lead)

    return make_node(a.data * b.data, "multiply", (a, b), back)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)

    def back(g):
        return (g * s,)

    return make_node(a.data * s, "scale", (a,), back)


def neg(a):
    return make_node(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, "matmul", (a, b), back)


def conv2d(x, w, b):
    """Valid-padding, stride-1 convolution on NHWC input.

    ``w`` has shape (kh, kw, in_channels, filters); ``b`` has shape (filters,).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and 4-d kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, cin, f = w.shape
    if cin != c or kh > h or kw > wd:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
    ho, wo = h - kh + 1, wd - kw + 1
    cols = kernels.im2col(x.data, kh, kw).reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, f)
    out = (cols @ w2 + b.data).reshape(n, ho, wo, f)

    def back(g):
        g2 = g.reshape(n * ho * wo, f)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
            gx = kernels.col2im(gcols, h, wd)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, "conv2d", (x, w, b), back)


def relu(x):
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def abs(x):  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.data)
    return make_node(np.abs(x.data), "abs", (x,), lambda g: (g * s,))


def sqrt(x):
    out = np.sqrt(x.data)
    return make_node(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def log(x):
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return make_node(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp_min(x, floor):
    """Elementwise max(x, floor); no gradient flows where x < floor."""
    mask = x.data >= floor
    out = np.where(mask, x.data, floor).astype(x.dtype)
    return make_node(out, "clamp_min", (x,), lambda g: (g * mask,))


def softmax(x):
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_node(p, "softmax", (x,), back)


def flatten(x):
    """(N, ...) -> (N, prod(...))."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return make_node(out, "flatten", (x,), lambda g: (g.reshape(shape),))


def reshape(x, shape):
    old = x.shape
    return make_node(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def dropout(x, rate, train, rng=None):
    """Inverted dropout: identity when ``train`` is false."""
    if not train or rate == 0.0:
        return make_node(x.data, "dropout", (x,), lambda g: (g,))
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return make_node(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


def sum(x, axis=None):  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis)), "sum", (x,), back)


def mean(x, axis=None):
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def max(x, axis=-1):  # noqa: A001
    """Reduction max along one axis; the gradient goes to the first argmax."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_node(out, "max", (x,), back)


def take(x, index):
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_node(x.data[index], "take", (x,), back)


def forward_op(kind, inputs, **kwargs):
    """Dispatch by op name; ``inputs`` is a list of tensors."""
    table = {
        "matmul": matmul, "add": add, "conv2d": conv2d, "relu": relu,
        "flatten": flatten, "dropout": dropout, "softmax": softmax, "log": log,
        "sum": sum, "mean": mean, "max": max, "subtract": subtract,
        "scale": scale, "multiply": multiply, "abs": abs, "sqrt": sqrt,
        "clamp_min": clamp_min, "take": take, "neg": neg, "reshape": reshape,
    }
    if kind not in table:
        raise ValueError(f"unknown op {kind!r}")
    return table[kind](*inputs, **kwargs)

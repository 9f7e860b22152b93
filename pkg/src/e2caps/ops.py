"""Differentiable operations on :class:`~e2caps.tensor.Tensor`.

Every op takes and returns Tensors (plain arrays and python scalars are
promoted to constants of the other operand's dtype) and registers a backward
closure through :func:`~e2caps.tensor.make_node`.  Spatial ops use the
batched NCHW layout.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import _kernels
from .tensor import Tensor, _needs_grad, make_node


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# Piecewise ops (relu, maxpool2) append their branch pattern here while a
# recording is active; finite-difference checks use it to spot kinks.
_branch_log = None


@contextmanager
def record_branches():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return make_node(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return make_node(out, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting semantics (ndim >= 2)."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return make_node(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask))
    return make_node(np.where(mask, x.data, x.dtype.type(0)), (x,),
                     lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    out = out.astype(x.dtype, copy=False)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_node(out, (x,),
                     lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    out = np.sqrt((x.data * x.data).sum(axis=axis))
    xd = x.data

    def backward(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1)
        return (np.where(o > 0, xd / safe, 0) * np.expand_dims(g, axis),)

    return make_node(out, (x,), backward)


SQUASH_EPS = 1e-9


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Capsule squashing: shrink ``s`` to norm ``|s|^2 / (1 + |s|^2)``.

    Uses ``sqrt(|s|^2 + eps)`` in the denominator so ``squash(0) == 0`` and
    the backward pass stays finite at the origin.
    """
    sd = s.data
    n2 = (sd * sd).sum(axis=axis, keepdims=True)
    root = np.sqrt(n2 + SQUASH_EPS)
    scale = n2 / ((1 + n2) * root)
    out = scale * sd

    def backward(g):
        # d scale / d n2, written without 1/n2 so it is finite at n2 = 0
        dscale = 1 / ((1 + n2) * root) - scale / (1 + n2) - scale / (2 * (n2 + SQUASH_EPS))
        proj = (sd * g).sum(axis=axis, keepdims=True)
        return (scale * g + 2 * dscale * proj * sd,)

    return make_node(out, (s,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` for ``x`` of shape (..., N) and ``W`` of shape (M, N)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"non-integral output size: ({size} + 2*{padding} - {k}) / {stride}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,kh,kw).

    A 3-D input (C,H,W) is treated as a batch of one and the output is
    returned 3-D as well.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects input (B,C,H,W) and weight (O,C,kh,kw)")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be positive and padding non-negative")
    b, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    k = _kernels.active
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(b, c, hp * wp)
    else:
        cols = k.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, o, ho, wo)

    def backward(g):
        g3 = g.reshape(b, o, ho * wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g3)
        if kh == 1 and kw == 1 and stride == 1:
            gxp = gcols.reshape(b, c, hp, wp)
        else:
            gxp = k.col2im(gcols, c, hp, wp, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties send the gradient to the first max."""
    if x.ndim == 3:
        out = maxpool2(reshape(x, (1,) + x.shape))
        return reshape(out, out.shape[1:])
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    k = _kernels.active
    out, idx = k.maxpool2(np.ascontiguousarray(x.data))
    if _branch_log is not None:
        _branch_log.append(idx.copy())
    return make_node(out, (x,),
                     lambda g: (k.maxpool2_backward(np.ascontiguousarray(g), idx),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return mul(sum(mul(lp, onehot)), -1.0 / len(labels))

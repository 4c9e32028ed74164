"""Differentiable primitives over :class:`Tensor`.

Every function computes its forward value with numpy and, when a tape is
recording, registers a closure mapping the output adjoint to input adjoints.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError
from .tensor import (
    SENTINEL,
    Tensor,
    check_leading_broadcast,
    make_result,
    unbroadcast,
    wrap,
)

_GELU_C = math.sqrt(2.0 / math.pi)


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = wrap(a)
    b = _operand(b, a)
    check_leading_broadcast(a.shape, b.shape, "add")
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = wrap(a)
    b = _operand(b, a)
    check_leading_broadcast(a.shape, b.shape, "sub")
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = wrap(a)
    b = _operand(b, a)
    check_leading_broadcast(a.shape, b.shape, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = wrap(a)
    b = _operand(b, a)
    check_leading_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data
    return make_result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    factor = a.data.dtype.type(factor)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),))


def sin(a: Tensor) -> Tensor:
    return make_result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return make_result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (a,), lambda g: (g * _sigmoid(x),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return make_result(out, (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with leading-batch broadcasting."""
    a, b = wrap(a), wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    check_leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), backward)


# -- reductions & shape -------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the only way to expand non-leading unit axes."""
    out = np.broadcast_to(a.data, shape).copy()
    return make_result(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a: Tensor, index, axis=0) -> Tensor:
    """Gather entries along ``axis`` with an integer index array; adjoint scatter-adds."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        g_moved = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, g_moved)
        return (full,)

    return make_result(out, (a,), backward)


def weighted_take(a: Tensor, index, weights) -> Tensor:
    """Rows ``sum_k weights[..., k] * a[index[..., k]]`` (linear interpolation of a table)."""
    index = np.asarray(index, dtype=np.intp)
    weights = np.asarray(weights, dtype=a.data.dtype)
    if index.shape != weights.shape:
        raise DimensionError(f"weighted_take: index {index.shape} vs weights {weights.shape}")
    out = np.einsum("...k,...kd->...d", weights, a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        contrib = weights[..., None] * g[..., None, :]
        np.add.at(full, index.reshape(-1), contrib.reshape(-1, a.shape[-1]))
        return (full,)

    return make_result(out, (a,), backward)


# -- masking & normalization --------------------------------------------------


def masked_fill(a: Tensor, mask, value=SENTINEL) -> Tensor:
    """Keep ``a`` where ``mask`` is true and write ``value`` elsewhere.

    ``mask`` is a constant boolean array that may broadcast over ``a``; the
    output takes the broadcast shape.
    """
    mask = np.asarray(mask, dtype=bool)
    shape = np.broadcast_shapes(a.shape, mask.shape)
    out = np.where(mask, a.data, a.data.dtype.type(value))
    out = np.broadcast_to(out, shape).copy()
    return make_result(out, (a,), lambda g: (unbroadcast(np.where(mask, g, 0), a.shape),))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction.

    Entries at or below half the sentinel are treated as masked and map to
    exactly 0; a row with every entry masked maps to all zeros.
    """
    x = wrap(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: needs a non-empty last axis, got {x.shape}")
    masked = x.data <= SENTINEL / 2
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e[masked] = 0
    total = e.sum(axis=-1, keepdims=True)
    out = e / np.where(total > 0, total, 1)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), backward)


def logsumexp_lastdim(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis; the shift by the row max is a constant."""
    shift = x.data.max(axis=-1, keepdims=True)
    shifted = sub(x, Tensor(np.broadcast_to(shift, x.shape), dtype=x.data.dtype))
    return add(log(sum(exp(shifted), axis=-1)), Tensor(shift[..., 0], dtype=x.data.dtype))


def layer_norm(x: Tensor, gain: Tensor, eps=1e-6) -> Tensor:
    """Normalize over the last axis and multiply by ``gain`` (no bias)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv
    check_leading_broadcast(x.shape, gain.shape, "layer_norm")

    def backward(g):
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape)

    return make_result(xhat * gain.data, (x, gain), backward)


def l2_normalize(x: Tensor, eps=1e-12) -> Tensor:
    norm = sqrt(add(sum(square(x), axis=-1, keepdims=True), eps))
    return div(x, broadcast_to(norm, x.shape))


def _install_operators():
    Tensor.__add__ = lambda a, b: add(a, b)
    Tensor.__radd__ = lambda a, b: add(a, b)
    Tensor.__sub__ = lambda a, b: sub(a, b)
    Tensor.__rsub__ = lambda a, b: sub(_operand(b, a), a)
    Tensor.__mul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(a, b)
    Tensor.__rmul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(a, b)
    Tensor.__truediv__ = lambda a, b: scale(a, 1.0 / b) if np.isscalar(b) else div(a, b)
    Tensor.__neg__ = neg
    Tensor.__matmul__ = matmul
    Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 else shape)
    Tensor.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    Tensor.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)


_install_operators()

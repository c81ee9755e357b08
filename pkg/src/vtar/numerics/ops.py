"""Differentiable forward ops.

Shapes must match exactly; the only implicit broadcast is a Python scalar or a
0-d tensor against a tensor. Anything else goes through :func:`broadcast_to`
so the expansion (and its summing backward rule) is visible at the call site.
"""

from __future__ import annotations

import builtins
import math
from numbers import Real
from typing import Optional, Sequence

import numpy as np

from vtar.errors import ShapeError
from vtar.numerics.tensor import Tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(arr) -> Tensor:
    """Wrap an array as a non-differentiable tensor without the copy."""
    arr = np.asarray(arr, dtype=np.float64)
    return make_result("constant", arr, (), lambda g: ())


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    if isinstance(a, Real):
        return _add_const(b, float(a))
    if isinstance(b, Real):
        return _add_const(a, float(b))
    _same_shape("add", a, b)
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def _add_const(x: Tensor, c: float) -> Tensor:
    return make_result("add", x.data + c, (x,), lambda g: (g,))


def sub(a, b) -> Tensor:
    if isinstance(b, Real):
        return _add_const(a, -float(b))
    if isinstance(a, Real):
        return make_result("sub", float(a) - b.data, (b,), lambda g: (-g,))
    _same_shape("sub", a, b)
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(a, Real):
        a, b = b, a
    if isinstance(b, Real):
        c = float(b)
        return make_result("mul", a.data * c, (a,), lambda g: (g * c,))
    if b.ndim == 0 and a.ndim != 0:
        a, b = b, a
    if a.ndim == 0 and b.ndim != 0:
        s, t = a, b

        def back(g):
            return (np.sum(g * t.data), g * s.data)

        return make_result("mul", s.data * t.data, (s, t), back)
    _same_shape("mul", a, b)
    return make_result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data

    def back(g):
        return (g / b.data, -g * out / b.data)

    return make_result("div", out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m) or (..., n, k) @ (..., k, m) with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one big GEMM is faster than numpy's stacked loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a._requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b._requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_result("matmul", out, (a, b), back)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose", x.shape)
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(x.shape, shape[lead:])):
        raise ShapeError("broadcast_to", x.shape, shape)
    expanded = tuple(i for i, s in enumerate(x.shape) if s == 1 and shape[lead + i] != 1)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    # Materialised: stride-0 views push matmul off its BLAS path.
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_result("broadcast_to", out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError("concat", ref.shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def slice(x: Tensor, index) -> Tensor:  # noqa: A001 - mirrors the op name
    """Basic (non-fancy) indexing: ints and slices only."""
    idx = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(i, (int, np.integer, builtins.slice, type(Ellipsis))) for i in idx):
        raise TypeError("slice: only ints, slices and Ellipsis are supported")
    out = x.data[index]
    if out.size == 0:
        raise ShapeError("slice", x.shape, out.shape)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result("slice", np.array(out), (x,), back)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` along axis 0; ``ids`` may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather: ids outside [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_result("gather", out, (table,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU, ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))`` with ``c = sqrt(2/pi)``."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return make_result("gelu", out, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_result("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), back)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis to zero mean, unit (biased) variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return make_result("layer_norm", out, (x,), back)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result("sum", np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return make_result("mean", np.asarray(out), (x,), back)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise ``||a_i - b_k||^2`` for a (n, d) and b (m, d), computed from differences."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("squared_distance", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.sum(diff * diff, axis=-1)

    def back(g):
        w = 2.0 * g[:, :, None] * diff
        return (w.sum(axis=1), -w.sum(axis=0))

    return make_result("squared_distance", out, (a, b), back)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def back(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return make_result("l2_normalize", out, (x,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    out = -logp[rows, labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / labels.size),)

    return make_result("cross_entropy", np.asarray(out), (logits,), back)


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data)


def straight_through(x: Tensor, value: Tensor) -> Tensor:
    """Forward returns ``value`` bit-exactly; backward hands the gradient to ``x`` unchanged."""
    _same_shape("straight_through", x, value)
    return make_result("straight_through", value.data.copy(), (x, value), lambda g: (g, None))

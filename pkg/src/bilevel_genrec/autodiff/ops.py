"""Differentiable primitives.

Each primitive computes its forward value with numpy and registers a backward
rule expressed in terms of other primitives, which keeps every rule itself
differentiable (second order comes for free).
"""
from __future__ import annotations

import numbers

import numpy as np

from .tensor import ShapeError, Tensor, is_grad_enabled, make_node

__all__ = [
    "as_tensor", "add", "sub", "mul", "div", "neg", "power", "exp", "log", "relu",
    "matmul", "sum", "mean", "reshape", "transpose", "swap_last", "broadcast_to",
    "sum_to", "getitem", "take", "pick", "concat", "stack", "softmax", "log_softmax",
    "layer_norm", "squared_distance", "cross_entropy", "stop_gradient",
    "straight_through", "dropout", "scale",
]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary(op, a, b, fn):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(op, f"cannot combine shapes {a.shape} and {b.shape}") from exc
    return a, b, data


# -- shape plumbing -------------------------------------------------------------

def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    src_shape = x.shape

    def backward(g, out):
        return (broadcast_to(g, src_shape),)

    return make_node(data, (x,), backward, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError("broadcast_to", f"cannot broadcast {x.shape} to {shape}") from exc
    src_shape = x.shape

    def backward(g, out):
        return (sum_to(g, src_shape),)

    return make_node(data, (x,), backward, "broadcast_to")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from exc
    src_shape = x.shape

    def backward(g, out):
        return (reshape(g, src_shape),)

    return make_node(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backward(g, out):
        return (transpose(g, inverse),)

    return make_node(data, (x,), backward, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(
        isinstance(k, (slice, numbers.Integral)) or k is None or k is Ellipsis for k in items
    )


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data[key]
    except IndexError as exc:
        raise ShapeError("getitem", str(exc)) from exc
    src_shape = x.shape

    def backward(g, out):
        return (_index_add(g, key, src_shape),)

    return make_node(data, (x,), backward, "getitem")


def _index_add(g: Tensor, key, shape) -> Tensor:
    """Scatter ``g`` into zeros of ``shape`` at ``key`` (adjoint of getitem)."""
    data = np.zeros(shape)
    if _is_basic_key(key):
        data[key] = g.data
    else:
        np.add.at(data, key, g.data)

    def backward(gg, out):
        return (getitem(gg, key),)

    return make_node(data, (g,), backward, "index_add")


def take(table: Tensor, index) -> Tensor:
    """Row gather ``table[index]`` along axis 0 (embedding lookup)."""
    index = np.asarray(index, dtype=np.intp)
    table = as_tensor(table)
    n = table.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError("take", f"row index out of range for {n} rows")
    data = table.data[index]
    src_shape = table.shape

    def backward(g, out):
        return (_scatter_rows(g, index, src_shape),)

    return make_node(data, (table,), backward, "take")


def _scatter_rows(g: Tensor, index: np.ndarray, shape) -> Tensor:
    data = np.zeros(shape)
    flat_index = index.reshape(-1)
    np.add.at(data, flat_index, g.data.reshape((flat_index.size,) + tuple(shape[1:])))

    def backward(gg, out):
        return (take(gg, index),)

    return make_node(data, (g,), backward, "scatter_rows")


def pick(x: Tensor, index) -> Tensor:
    """``x[..., index]`` with one index per leading position (take_along_axis on the last axis)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise ShapeError("pick", f"index shape {index.shape} != leading shape {x.shape[:-1]}")
    data = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    n = x.shape[-1]

    def backward(g, out):
        return (_unpick(g, index, n),)

    return make_node(data, (x,), backward, "pick")


def _unpick(g: Tensor, index: np.ndarray, n: int) -> Tensor:
    data = np.zeros(g.shape + (n,))
    np.put_along_axis(data, index[..., None], g.data[..., None], axis=-1)

    def backward(gg, out):
        return (pick(gg, index),)

    return make_node(data, (g,), backward, "unpick")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError("concat", f"incompatible shapes {shapes} on axis {axis}") from exc
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g, out):
        grads = []
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                grads.append(None)
                continue
            key = (slice(None),) * ax + (slice(int(bounds[i]), int(bounds[i + 1])),)
            grads.append(getitem(g, key))
        return tuple(grads)

    return make_node(data, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


# -- arithmetic -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b, data = _binary("add", a, b, np.add)

    def backward(g, out):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return make_node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b, data = _binary("sub", a, b, np.subtract)

    def backward(g, out):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(neg(g), b.shape) if b.requires_grad else None,
        )

    return make_node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b, data = _binary("mul", a, b, np.multiply)

    def backward(g, out):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return make_node(data, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar."""
    x = as_tensor(x)
    c = float(c)

    def backward(g, out):
        return (scale(g, c),)

    return make_node(x.data * c, (x,), backward, "scale")


def div(a, b) -> Tensor:
    a, b, data = _binary("div", a, b, np.divide)

    def backward(g, out):
        return (
            sum_to(div(g, b), a.shape) if a.requires_grad else None,
            sum_to(neg(div(mul(g, out), b)), b.shape) if b.requires_grad else None,
        )

    return make_node(data, (a, b), backward, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, out):
        return (neg(g),)

    return make_node(-x.data, (x,), backward, "neg")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)

    def backward(g, out):
        if p == 1.0:
            return (g,)
        return (mul(g, scale(power(x, p - 1.0), p)),)

    return make_node(np.power(x.data, p), (x,), backward, "power")


def exp(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, out):
        return (mul(g, out),)

    return make_node(np.exp(x.data), (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, out):
        return (div(g, x),)

    return make_node(np.log(x.data), (x,), backward, "log")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g, out):
        return (mul(g, Tensor(mask.astype(np.float64))),)

    return make_node(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading axes; 1-D operands are promoted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", "operands must have at least one axis")
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul", f"cannot batch {a.shape} @ {b.shape}") from exc

    def backward(g, out):
        return (
            sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None,
            sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None,
        )

    return make_node(data, (a, b), backward, "matmul")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    src_shape = x.shape
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = {a % x.ndim for a in (axis if isinstance(axis, tuple) else (axis,))}
        kept = tuple(1 if i in axes else n for i, n in enumerate(src_shape))

    def backward(g, out):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return make_node(np.asarray(data), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisation / probabilities ------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Softmax with max subtraction, so results are reproducible bit for bit."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g, out):
        inner = sum(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return make_node(data, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g, out):
        total = sum(g, axis=axis, keepdims=True)
        return (sub(g, mul(exp(out), total)),)

    return make_node(data, (x,), backward, "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part).

    Backward uses the closed form ``rstd * (g - mean(g) - xhat * mean(g * xhat))``.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd_data = 1.0 / np.sqrt(var + eps)
    data = centred * rstd_data

    def backward(g, out):
        if is_grad_enabled():
            # rebuild rstd as a function of x so second derivatives stay exact
            c = sub(x, mean(x, axis=-1, keepdims=True))
            rstd = power(add(mean(mul(c, c), axis=-1, keepdims=True), eps), -0.5)
        else:
            rstd = Tensor(rstd_data)
        gm = mean(g, axis=-1, keepdims=True)
        gx = mean(mul(g, out), axis=-1, keepdims=True)
        return (mul(rstd, sub(sub(g, gm), mul(out, gx))),)

    return make_node(data, (x,), backward, "layer_norm")


def squared_distance(a, b, axis: int = -1) -> Tensor:
    """``sum((a - b)**2, axis)`` with broadcasting between ``a`` and ``b``."""
    a, b, diff = _binary("squared_distance", a, b, np.subtract)
    data = (diff * diff).sum(axis=axis)

    def backward(g, out):
        d = sub(a, b)
        gd = scale(mul(d, reshape(g, _keep_axis(g.shape, axis, d.ndim))), 2.0)
        return (
            sum_to(gd, a.shape) if a.requires_grad else None,
            sum_to(neg(gd), b.shape) if b.requires_grad else None,
        )

    return make_node(data, (a, b), backward, "squared_distance")


def _keep_axis(reduced_shape, axis, ndim):
    ax = axis % ndim
    return tuple(reduced_shape[:ax]) + (1,) + tuple(reduced_shape[ax:])


def cross_entropy(logits, targets) -> Tensor:
    """Per-position negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    return neg(pick(log_softmax(logits, axis=-1), targets))


# -- gradient routing -------------------------------------------------------------

def stop_gradient(x) -> Tensor:
    """Same value, no path back to ``x``."""
    x = as_tensor(x)
    return Tensor(x.data)


def straight_through(hard, soft) -> Tensor:
    """Forward value of ``hard``, gradient routed entirely to ``soft``.

    Equal to ``soft + stop_gradient(hard - soft)`` except the forward value is
    ``hard`` bit for bit rather than ``soft + (hard - soft)`` rounded.
    """
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", f"shapes differ: {hard.shape} vs {soft.shape}")

    def backward(g, out):
        return (g,)

    return make_node(hard.data, (soft,), backward, "straight_through")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(keep))

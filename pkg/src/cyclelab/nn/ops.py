"""Differentiable primitives used by the fixed network architectures."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, record

LEAKY_SLOPE = 0.01


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return record(a.value + b.value, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return record(a.value - b.value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, needs):
        return (
            _unbroadcast(g * b.value, a.shape) if needs[0] else None,
            _unbroadcast(g * a.value, b.shape) if needs[1] else None,
        )

    return record(a.value * b.value, (a, b), back)


def square(a) -> Tensor:
    a = as_tensor(a)
    return record(a.value**2, (a,), lambda g, needs: (2.0 * a.value * g,))


def total(a, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def back(g, needs):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record(out, (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(total(a, axis), 1.0 / n)


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (out, in)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: input dim {x.shape[-1]} vs layer input {W.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, x.shape[-1])
    out = (x2 @ W.value.T).reshape(lead + (W.shape[0],))
    if b is not None:
        b = as_tensor(b)
        out = out + b.value
    parents = (x, W) if b is None else (x, W, b)

    def back(g, needs):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.value).reshape(x.shape) if needs[0] else None
        gW = g2.T @ x2 if needs[1] else None
        res = [gx, gW]
        if b is not None:
            res.append(g2.sum(axis=0) if needs[2] else None)
        return tuple(res)

    return record(out, parents, back)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.value > 0
    out = np.where(pos, x.value, slope * x.value)
    return record(out, (x,), lambda g, needs: (np.where(pos, g, slope * g),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), back)


def masked_softmax(x, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; fully masked rows are all zero."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.value, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.where(mask, x.value - m, -np.inf))
    s_sum = e.sum(axis=-1, keepdims=True)
    s = e / np.where(s_sum > 0, s_sum, 1.0)

    def back(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), back)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum with an explicit output; every input index must reach the output or the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = spec.split("->")
    sa, sb = ins.split(",")
    val = np.einsum(spec, a.value, b.value, optimize=True)

    def back(g, needs):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.value, optimize=True) if needs[0] else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.value, optimize=True) if needs[1] else None
        return ga, gb

    return record(val, (a, b), back)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    val = np.concatenate([t.value for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g, needs):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return record(val, tuple(ts), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(x.value.reshape(shape), (x,), lambda g, needs: (g.reshape(x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(np.broadcast_to(x.value, shape).copy(), (x,), lambda g, needs: (_unbroadcast(g, x.shape),))


def take_last(x, idx: np.ndarray) -> Tensor:
    """``x[..., idx[...]]``: pick one entry of the last axis per leading position."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=int)[..., None]
    val = np.take_along_axis(x.value, idx, axis=-1)[..., 0]

    def back(g, needs):
        gx = np.zeros_like(x.value)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return record(val, (x,), back)

"""Differentiable primitives.

Each op computes its value with numpy and, when any input is tracked,
records a closure that maps the output gradient to input gradients.
Broadcasting is limited to tensor-with-scalar in :func:`add`; matmul
accepts a 2-D right operand against batched left operands.
"""
from __future__ import annotations

import math

import numpy as np

from .. import _kernels
from .tape import NonFiniteError, Tensor, tracking_tape

_GELU_C = math.sqrt(2.0 / math.pi)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b^T``) over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has the same
    leading axes as ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2; use dot for vectors")
    if b.data.ndim != 2 and b.data.shape[:-2] != a.data.shape[:-2]:
        raise ValueError(f"matmul batch mismatch {a.shape} vs {b.shape}")
    bm = _swap(b.data) if transpose_b else b.data
    if a.data.shape[-1] != bm.shape[-2]:
        raise ValueError(f"matmul inner mismatch {a.shape} vs {b.shape}")
    out = np.matmul(a.data, bm)
    tape = tracking_tape(a, b)
    if tape is None:
        return Tensor(out)

    def backward(g):
        ga = np.matmul(g, _swap(bm)) if a.tape is not None else None
        gb = None
        if b.tape is not None:
            if bm.ndim == 2:
                k, n = bm.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(_swap(a.data), g)
            if transpose_b:
                gb = _swap(gb)
        return ga, gb

    return tape.record("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data
    tape = tracking_tape(a, b)
    if tape is None:
        return Tensor(out)

    def backward(g):
        ga = g if a.data.ndim == g.ndim else np.sum(g)
        gb = g if b.data.ndim == g.ndim else np.sum(g)
        return ga, gb

    return tape.record("add", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    if a.tape is None:
        return Tensor(out)
    return a.tape.record("scale", out, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    if a.tape is None:
        return Tensor(out)
    return a.tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    th = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    out = 0.5 * x * (1.0 + th)
    if a.tape is None:
        return Tensor(out)

    def backward(g):
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return a.tape.record("gelu", out, (a,), backward)


def _softmax(x):
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    out = _softmax(a.data)
    if a.tape is None:
        return Tensor(out)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return a.tape.record("softmax", out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    tape = tracking_tape(x, gain, bias)
    if tape is None:
        return Tensor(out)

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        ggain = np.sum(flat_g * xhat.reshape(flat_g.shape), axis=0)
        gbias = np.sum(flat_g, axis=0)
        dxhat = g * gain.data
        gx = rstd * (dxhat - np.mean(dxhat, axis=-1, keepdims=True)
                     - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return gx, ggain, gbias

    return tape.record("layer_norm", out, (x, gain, bias), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass touches only gathered rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out = table.data[ids]
    if table.tape is None:
        return Tensor(out)

    def backward(g):
        gt = np.zeros_like(table.data)
        _kernels.scatter_add_rows(gt, ids, g)
        return (gt,)

    return table.tape.record("embedding", out, (table,), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = 0) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-ignored positions."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if x.shape[:-1] != targets.shape:
        raise ValueError(f"cross_entropy shape mismatch {x.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[-1]):
        raise ValueError("cross_entropy target out of range")
    mask = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy with no scored positions")
    z = x - np.max(x, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * mask
    out = np.asarray(np.sum(nll) / count, dtype=x.dtype)
    if not np.isfinite(out):
        raise NonFiniteError("non-finite loss")
    if logits.tape is None:
        return Tensor(out)

    def backward(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        p *= (mask / count)[..., None].astype(x.dtype)
        return (p * g,)

    return logits.tape.record("cross_entropy", out, (logits,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    tape = tracking_tape(*tensors)
    if tape is None:
        return Tensor(out)
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record("concat", out, tensors, backward)


def slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    index = [np.s_[:]] * a.data.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    out = a.data[index]
    if a.tape is None:
        return Tensor(out)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return a.tape.record("slice", out, (a,), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(np.sum(a.data), dtype=a.data.dtype)
    if a.tape is None:
        return Tensor(out)
    return a.tape.record("sum", out, (a,), lambda g: (np.full_like(a.data, g),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors."""
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError("dot needs two vectors of equal length")
    out = np.asarray(np.dot(a.data, b.data))
    tape = tracking_tape(a, b)
    if tape is None:
        return Tensor(out)
    return tape.record("dot", out, (a, b), lambda g: (g * b.data, g * a.data))

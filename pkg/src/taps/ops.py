"""Differentiable operations over :class:`~taps.tensor.Tensor`.

Only the operations the layer-selection models need are provided. There is no
general broadcasting; every op checks its shapes and raises
:class:`~taps.errors.DimensionError` on mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taps import kernels
from taps.errors import BatchSizeError, DimensionError
from taps.tensor import Tensor, as_tensor, make_result


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return make_result(A @ B, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` laid out ``[in, out]``.

    A 3-D input ``[n, t, d]`` is applied token-wise.
    """
    if x.data.ndim == 3:
        n, t, d = x.shape
        y = matmul(reshape(x, (n * t, d)), weight)
        if bias is not None:
            y = bias_add(y, bias)
        return reshape(y, (n, t, weight.shape[1]))
    y = matmul(x, weight)
    return bias_add(y, bias) if bias is not None else y


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return make_result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def bias_add(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a per-channel vector ``b`` along ``axis`` of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim <= axis or x.shape[axis] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.data.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward(g):
        return g, (g.sum(axis=others) if b.requires_grad else None)

    return make_result(x.data + b.data.reshape(view), (x, b), backward, "bias_add")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[start:stop]), (x,), backward, "rows")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def abs_sum(x: Tensor) -> Tensor:
    """Sum of absolute values; the subgradient uses ``sign(0) = 0``."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    out = np.asarray(np.abs(x.data).sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (g * sign,), "abs_sum")


def total(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        count = x.data.size
        out = np.asarray(x.data.mean(), dtype=x.dtype)

        def backward(g):
            return (np.full(shape, g / count, dtype=x.dtype),)
    else:
        count = shape[axis]
        out = x.data.mean(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g / count, axis), shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "mean")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: empty class dimension in shape {x.shape}")
    p = _softmax_rows(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result(p, (x,), backward, "softmax")


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[1] == 0:
        raise DimensionError(f"cross_entropy_loss: logits must be [n, C>0], got {logits.shape}")
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: labels {labels.shape} do not match logits {logits.shape}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return make_result(loss, (logits,), backward, "cross_entropy")


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, ``x: [n, c_in, h, w]``, ``k: [c_out, c_in, kh, kw]``."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * padding, w + 2 * padding)}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    K = k.data.reshape(co, -1)
    out = (cols @ K.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = kernels.col2im(g2 @ K, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        return gx, gk

    return make_result(np.ascontiguousarray(out), (x, k), backward, "conv2d")


def attention_single_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """``softmax((x Wq)(x Wk)^T / sqrt(d)) (x Wv) Wo`` for ``x: [t, d]`` or ``[n, t, d]``."""
    x, wq, wk, wv, wo = (as_tensor(a) for a in (x, wq, wk, wv, wo))
    if x.data.ndim not in (2, 3):
        raise DimensionError(f"attention: input must be [t, d] or [n, t, d], got {x.shape}")
    d = x.shape[-1]
    for nm, wt in (("Wq", wq), ("Wk", wk), ("Wv", wv), ("Wo", wo)):
        if wt.shape != (d, d):
            raise DimensionError(f"attention: {nm} has shape {wt.shape}, expected {(d, d)} for input {x.shape}")
    X = x.data
    Q, Kt, V = X @ wq.data, X @ wk.data, X @ wv.data
    inv = X.dtype.type(1.0 / np.sqrt(d))
    KT = np.swapaxes(Kt, -1, -2)
    P = _softmax_rows((Q @ KT) * inv)
    A = P @ V
    out = A @ wo.data

    def backward(g):
        gA = g @ wo.data.T
        gWo = _fold(np.swapaxes(A, -1, -2) @ g)
        gP = gA @ np.swapaxes(V, -1, -2)
        gV = np.swapaxes(P, -1, -2) @ gA
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * inv
        gQ = gS @ Kt
        gK = np.swapaxes(gS, -1, -2) @ Q
        XT = np.swapaxes(X, -1, -2)
        gx = gQ @ wq.data.T + gK @ wk.data.T + gV @ wv.data.T
        return (gx, _fold(XT @ gQ), _fold(XT @ gK), _fold(XT @ gV), gWo)

    return make_result(out, (x, wq, wk, wv, wo), backward, "attention")


def _fold(g):
    # sum per-example weight gradients of a batched [n, d, d] product
    return g.sum(axis=0) if g.ndim == 3 else g


@dataclass
class BatchNormStats:
    """Running estimates for batch normalization, updated in place in training mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)

    def copy(self) -> "BatchNormStats":
        return BatchNormStats(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, training: bool) -> Tensor:
    """Normalize ``x: [n, c, ...]`` per channel.

    Training mode uses batch statistics and moves ``stats`` toward them by an
    exponential moving average (the variance estimate is unbiased). Eval mode is
    the fixed affine map given by ``stats``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim < 2:
        raise DimensionError(f"batchnorm: input must be [n, c, ...], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} do not match {c} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    view = [1, c] + [1] * (x.data.ndim - 2)
    m = x.data.size // c
    dt = x.dtype.type
    if training:
        if x.shape[0] < 2:
            raise BatchSizeError(f"batchnorm: training mode needs at least 2 examples, got {x.shape[0]}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = dt(stats.momentum)
        stats.mean = ((1 - mom) * stats.mean + mom * mu).astype(stats.mean.dtype)
        unbiased = var * dt(m / (m - 1)) if m > 1 else var
        stats.var = ((1 - mom) * stats.var + mom * unbiased).astype(stats.var.dtype)
    else:
        mu, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    inv_std = (1 / np.sqrt(var + dt(stats.eps))).astype(x.dtype)
    xhat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(view)
            if training:
                gx = (inv_std.reshape(view) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes).reshape(view)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(view)
                )
            else:
                gx = gxhat * inv_std.reshape(view)
        return gx, gg, gb

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm")

"""Central finite differences, the independent oracle for every backward rule."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from taps.errors import ContractError
from taps.tensor import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.size != 1:
        raise ContractError(f"finite_diff_grad: f must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff_grad(f: Callable, x, h: float = 1e-3) -> np.ndarray:
    """Return ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate ``i``.

    ``x`` is copied to float64 and ``f`` is called with float64 arrays.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_grad: step must be positive, got {h}")
    if isinstance(x, Tensor):
        x = x.data
    base = np.array(x, dtype=np.float64, copy=True)
    _scalar(f(base.copy()))
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(base.copy()))
        flat[i] = orig - h
        fm = _scalar(f(base.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def engine_grads(fn: Callable, inputs: Sequence[np.ndarray], dtype=np.float32) -> list:
    """Gradients of the scalar ``fn(*tensors)`` computed by the tape."""
    tensors = [Tensor(np.asarray(a), requires_grad=True, dtype=dtype) for a in inputs]
    out = fn(*tensors)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros(t.shape, dtype) for t in tensors]


def oracle_grads(fn: Callable, inputs: Sequence[np.ndarray], h: float = 1e-3) -> list:
    """Finite-difference gradients of ``fn`` with respect to each input, evaluated in float64."""
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    grads = []
    for idx in range(len(inputs)):
        def f(v, idx=idx):
            args = [Tensor(a, dtype=np.float64) for a in inputs]
            args[idx] = Tensor(v, dtype=np.float64)
            return fn(*args)

        grads.append(finite_diff_grad(f, inputs[idx], h))
    return grads


def check_gradients(fn: Callable, inputs: Sequence[np.ndarray], h: float = 1e-3) -> list:
    """Relative error between tape and oracle gradients, one entry per input."""
    ours = engine_grads(fn, inputs)
    ref = oracle_grads(fn, inputs, h)
    return [relative_error(a, b) for a, b in zip(ours, ref)]

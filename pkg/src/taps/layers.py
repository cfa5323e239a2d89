"""Gated weight deltas over frozen base layers.

A layer's effective weight is ``base + I(score >= tau) * delta``. The forward
pass uses the hard indicator. On the backward pass the indicator is treated as
the identity, so the score receives ``<dL/dw, delta>`` whether or not the gate
is open, while the delta itself only receives gradient through an open gate.
"""

from __future__ import annotations

import numpy as np

from taps import ops
from taps.errors import ConfigurationError, DimensionError
from taps.ops import BatchNormStats
from taps.tensor import Tensor, make_result

DEFAULT_TAU = 0.1

LAYER_KINDS = ("linear", "conv", "qkv", "projection", "mlp")


def indicator(s: float, tau: float = DEFAULT_TAU) -> float:
    return 1.0 if float(s) >= float(tau) else 0.0


def indicator_backward(g):
    # straight-through: the threshold step is differentiated as the identity
    return g


def gated_weight(base: Tensor, delta: Tensor, score: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """``base + indicator(score, tau) * delta`` with a straight-through score gradient.

    A closed gate returns an exact copy of ``base``.
    """
    if base.shape != delta.shape:
        raise DimensionError(f"gated_weight: base {base.shape} and delta {delta.shape} differ")
    gate = indicator(score.data.reshape(-1)[0], tau)
    if gate:
        out = base.data + delta.data
    else:
        out = base.data.copy()
    D = delta.data
    sshape, sdtype = score.shape, score.dtype

    def backward(g):
        g_delta = (g if gate else np.zeros_like(g)) if delta.requires_grad else None
        g_score = None
        if score.requires_grad:
            # d w / d I = delta, accumulated in float64 before rounding
            g_ind = np.dot(g.astype(np.float64).ravel(), D.astype(np.float64).ravel())
            g_score = np.full(sshape, indicator_backward(g_ind), dtype=sdtype)
        return (g, g_delta, g_score)

    return make_result(out, (base, delta, score), backward, "gated_weight")


class AdaptiveLayer:
    """One gated weight (and optional bias) sharing a single scalar score.

    ``kind`` is one of ``linear``, ``conv``, ``qkv``, ``projection`` or ``mlp``;
    ``conv`` layers also carry ``stride`` and ``padding``.
    """

    def __init__(self, name, kind, base_weight: Tensor, base_bias: Tensor | None = None, *,
                 tau=DEFAULT_TAU, init_score=1.0, stride=1, padding=0,
                 delta=None, delta_bias=None, trainable_score=True):
        if kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown adaptive layer kind {kind!r}")
        self.name = name
        self.kind = kind
        self.base = base_weight
        self.base_bias = base_bias
        self.tau = float(tau)
        self.stride = stride
        self.padding = padding
        dtype = base_weight.dtype
        if delta is None:
            delta = np.zeros(base_weight.shape, dtype=dtype)
        delta = np.asarray(delta, dtype=dtype)
        if delta.shape != base_weight.shape:
            raise DimensionError(f"{name}: delta {delta.shape} does not match base weight {base_weight.shape}")
        self.delta = Tensor(delta.copy(), requires_grad=True, name=f"{name}.delta")
        self.delta_bias = None
        if base_bias is not None:
            db = np.zeros(base_bias.shape, dtype=dtype) if delta_bias is None else np.asarray(delta_bias, dtype=dtype)
            if db.shape != base_bias.shape:
                raise DimensionError(f"{name}: delta bias {db.shape} does not match base bias {base_bias.shape}")
            self.delta_bias = Tensor(db.copy(), requires_grad=True, name=f"{name}.delta_bias")
        self.score = Tensor(np.asarray(init_score, dtype=dtype), requires_grad=trainable_score, name=f"{name}.score")

    @property
    def score_value(self) -> float:
        return float(self.score.data)

    @property
    def is_open(self) -> bool:
        return bool(indicator(self.score_value, self.tau))

    @property
    def num_delta_params(self) -> int:
        return self.delta.size + (self.delta_bias.size if self.delta_bias is not None else 0)

    def effective_weight(self) -> Tensor:
        return gated_weight(self.base, self.delta, self.score, self.tau)

    def effective_bias(self) -> Tensor | None:
        if self.base_bias is None:
            return None
        return gated_weight(self.base_bias, self.delta_bias, self.score, self.tau)

    def parameters(self) -> list:
        if not self.score.requires_grad and not self.is_open:
            return []
        params = [self.delta]
        if self.delta_bias is not None:
            params.append(self.delta_bias)
        if self.score.requires_grad:
            params.append(self.score)
        return params

    def forward(self, x: Tensor, gated: bool = True) -> Tensor:
        if gated:
            w, b = self.effective_weight(), self.effective_bias()
        else:
            w, b = self.base, self.base_bias
        if self.kind == "conv":
            y = ops.conv2d(x, w, self.stride, self.padding)
            return ops.bias_add(y, b) if b is not None else y
        if self.kind in ("qkv", "projection"):
            raise ConfigurationError(f"{self.name}: attention sub-matrices are applied by AdaptiveAttention")
        return ops.linear(x, w, b)

    __call__ = forward


class AdaptiveAttention:
    """Single-head self-attention whose four matrices are gated independently.

    With ``residual`` the block returns ``x + attention(x)``.
    """

    def __init__(self, q: AdaptiveLayer, k: AdaptiveLayer, v: AdaptiveLayer, o: AdaptiveLayer, residual=True):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.residual = residual

    @property
    def layers(self) -> list:
        return [self.q, self.k, self.v, self.o]

    def forward(self, x: Tensor, gated: bool = True) -> Tensor:
        if gated:
            mats = [layer.effective_weight() for layer in self.layers]
        else:
            mats = [layer.base for layer in self.layers]
        y = ops.attention_single_head(x, *mats)
        return ops.add(x, y) if self.residual else y

    __call__ = forward


class TaskBatchNorm:
    """Per-task affine parameters and running statistics for one batch-norm site."""

    def __init__(self, name, gamma, beta, stats: BatchNormStats):
        self.name = name
        self.gamma = Tensor(np.array(gamma, copy=True), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.array(beta, copy=True), requires_grad=True, name=f"{name}.beta")
        self.stats = stats.copy()

    @classmethod
    def fresh(cls, name, channels, dtype=np.float32):
        return cls(name, np.ones(channels, dtype), np.zeros(channels, dtype), BatchNormStats.fresh(channels, dtype))

    @property
    def num_params(self) -> int:
        return self.gamma.size + self.beta.size

    def parameters(self) -> list:
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.stats, training)

    __call__ = forward

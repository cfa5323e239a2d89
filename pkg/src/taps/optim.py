"""Sparsity-penalised objective, momentum SGD and cosine learning-rate annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from taps import ops
from taps.errors import ConfigurationError, ContractError, NonFiniteError
from taps.layers import DEFAULT_TAU
from taps.tensor import Tensor

DEFAULT_LAMBDA_GRID = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    lam: float = 0.5
    tau: float = DEFAULT_TAU
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    init_score: float = 1.0
    cosine: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive integers")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_ALIASES = {"lambda": "lam", "lr": "learning_rate", "batch-size": "batch_size", "weight-decay": "weight_decay"}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key).replace("-", "_")
        if key not in types:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if kind == "bool":
                out[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind == "int":
                out[key] = int(value)
            else:
                out[key] = float(value)
        except ValueError as exc:
            raise ConfigurationError(f"config line {lineno}: bad value for {key}: {value!r}") from exc
    return out


def load_config(path, **overrides) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def taps_loss(task_loss: Tensor, scores, lam: float, num_layers: int) -> Tensor:
    """``task_loss + lam / L * sum_i |s_i|``."""
    if num_layers < 1:
        raise ConfigurationError("the sparsity objective needs at least one adaptive layer")
    if len(scores) != num_layers:
        raise ContractError(f"taps_loss: got {len(scores)} scores for {num_layers} layers")
    if lam == 0:
        return task_loss
    penalty = ops.abs_sum(scores[0])
    for s in scores[1:]:
        penalty = ops.add(penalty, ops.abs_sum(s))
    return ops.add(task_loss, ops.scale(penalty, lam / num_layers))


def penalty_value(scores, lam: float, num_layers: int) -> float:
    return lam / num_layers * float(sum(abs(float(s.data)) for s in scores))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ContractError(f"cosine_lr: total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0
    total_steps: int = 0


def sgd_step(params, state: OptimizerState, lr: float, momentum: float, weight_decay: float = 0.0):
    """In-place momentum SGD over ``params`` (tensors with ``.grad``).

    ``v <- momentum * v + g``; ``p <- p - lr * v``. Tensors without a gradient
    are skipped. Every gradient is checked before anything is updated.
    """
    live = []
    for p in params:
        if not p.requires_grad:
            raise ContractError(f"sgd_step: {p.name or 'tensor'} does not require grad and must not be updated")
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ContractError(f"sgd_step: grad shape {p.grad.shape} != param shape {p.shape} for {p.name}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
        live.append(p)
    for p in live:
        dt = p.data.dtype.type
        g = p.grad
        if weight_decay:
            g = g + dt(weight_decay) * p.data
        v = state.velocity.get(p)
        v = g.copy() if v is None else dt(momentum) * v + g
        state.velocity[p] = v
        p.data = (p.data - dt(lr) * v).astype(p.data.dtype)
    state.step += 1
    return state


def zero_grad(params):
    for p in params:
        p.grad = None

"""Architecture descriptors, base models and per-task networks.

An architecture descriptor is a JSON-compatible dict::

    {"input_shape": [C, H, W] or [D],
     "layers": [{"type": "conv", "name": "conv1", "in_channels": 2, "out_channels": 8,
                 "kernel": 3, "stride": 1, "padding": 1},
                {"type": "bn", "name": "bn1", "num_features": 8},
                {"type": "relu"}, {"type": "flatten"},
                {"type": "linear", "name": "fc", "in_features": 72, "out_features": 16}, ...]}

Layer types: ``conv``, ``linear``, ``mlp`` (a linear layer left shared unless
``"adaptive": true``), ``attention`` (single head over ``[n, t, d]`` tokens),
``bn``, ``relu``, ``flatten``, ``tokens`` (``[n, t*d] -> [n, t, d]``) and
``token_mean``. ``conv``, ``linear`` and ``attention`` are adaptive unless
``"adaptive": false``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from taps import ops
from taps.errors import ConfigurationError, DimensionError
from taps.layers import DEFAULT_TAU, AdaptiveAttention, AdaptiveLayer, TaskBatchNorm
from taps.ops import BatchNormStats
from taps.tensor import Tensor

ATTENTION_PARTS = ("q", "k", "v", "o")


def _is_adaptive(spec) -> bool:
    if spec["type"] in ("conv", "linear", "attention"):
        return spec.get("adaptive", True)
    if spec["type"] == "mlp":
        return spec.get("adaptive", False)
    return False


def infer_shapes(descriptor) -> list:
    """Per-example output shape after each layer; raises on inconsistent specs."""
    shape = tuple(descriptor["input_shape"])
    shapes = []
    for spec in descriptor["layers"]:
        t = spec["type"]
        if t == "conv":
            if len(shape) != 3 or shape[0] != spec["in_channels"]:
                raise DimensionError(f"{spec['name']}: expects {spec['in_channels']} channels, input is {shape}")
            k, s, p = spec["kernel"], spec.get("stride", 1), spec.get("padding", 0)
            if k > shape[1] + 2 * p or k > shape[2] + 2 * p:
                raise DimensionError(f"{spec['name']}: kernel {k} larger than padded input {shape}")
            shape = (spec["out_channels"], (shape[1] + 2 * p - k) // s + 1, (shape[2] + 2 * p - k) // s + 1)
        elif t in ("linear", "mlp"):
            if shape[-1] != spec["in_features"]:
                raise DimensionError(f"{spec['name']}: expects {spec['in_features']} features, input is {shape}")
            shape = shape[:-1] + (spec["out_features"],)
        elif t == "attention":
            if len(shape) != 2 or shape[1] != spec["dim"]:
                raise DimensionError(f"{spec['name']}: expects [t, {spec['dim']}] tokens, input is {shape}")
        elif t == "bn":
            if shape[0] != spec["num_features"]:
                raise DimensionError(f"{spec['name']}: expects {spec['num_features']} channels, input is {shape}")
        elif t == "flatten":
            shape = (int(np.prod(shape)),)
        elif t == "tokens":
            n_tok = spec["num_tokens"]
            if len(shape) != 1 or shape[0] % n_tok:
                raise DimensionError(f"tokens: cannot split {shape} into {n_tok} tokens")
            shape = (n_tok, shape[0] // n_tok)
        elif t == "token_mean":
            shape = shape[1:]
        elif t != "relu":
            raise ConfigurationError(f"unknown layer type {t!r}")
        shapes.append(shape)
    return shapes


def feature_dim(descriptor) -> int:
    shapes = infer_shapes(descriptor)
    out = shapes[-1] if shapes else tuple(descriptor["input_shape"])
    if len(out) != 1:
        raise DimensionError(f"backbone must end in a flat feature vector, got {out}")
    return out[0]


def adaptive_slots(descriptor) -> list:
    """``(label, kind)`` for every gated matrix, in forward order."""
    slots = []
    for spec in descriptor["layers"]:
        if not _is_adaptive(spec):
            continue
        if spec["type"] == "attention":
            for part in ATTENTION_PARTS:
                slots.append((f"{spec['name']}.{part}", "projection" if part == "o" else "qkv"))
        else:
            kind = spec["type"]
            slots.append((spec["name"], kind))
    return slots


def init_weights(descriptor, rng: np.random.Generator, dtype=np.float32) -> dict:
    """He-normal weights, zero biases and identity batch-norm for every layer."""
    infer_shapes(descriptor)
    w = {}
    for spec in descriptor["layers"]:
        t, name = spec["type"], spec.get("name")
        if t == "conv":
            fan_in = spec["in_channels"] * spec["kernel"] ** 2
            shape = (spec["out_channels"], spec["in_channels"], spec["kernel"], spec["kernel"])
            w[f"{name}.weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            if spec.get("bias", True):
                w[f"{name}.bias"] = np.zeros(spec["out_channels"], dtype)
        elif t in ("linear", "mlp"):
            shape = (spec["in_features"], spec["out_features"])
            w[f"{name}.weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])).astype(dtype)
            if spec.get("bias", True):
                w[f"{name}.bias"] = np.zeros(spec["out_features"], dtype)
        elif t == "attention":
            d = spec["dim"]
            for part in ATTENTION_PARTS:
                w[f"{name}.{part}"] = (rng.standard_normal((d, d)) / np.sqrt(d)).astype(dtype)
        elif t == "bn":
            c = spec["num_features"]
            w[f"{name}.gamma"] = np.ones(c, dtype)
            w[f"{name}.beta"] = np.zeros(c, dtype)
            w[f"{name}.running_mean"] = np.zeros(c, dtype)
            w[f"{name}.running_var"] = np.ones(c, dtype)
    return w


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


@dataclass
class BaseModel:
    """Architecture plus the shared weights every task builds on."""

    descriptor: dict
    weights: dict = field(repr=False)

    def __post_init__(self):
        infer_shapes(self.descriptor)
        self.weights = {k: np.ascontiguousarray(v) for k, v in self.weights.items()}

    @classmethod
    def random(cls, descriptor, seed=0, dtype=np.float32) -> "BaseModel":
        return cls(copy.deepcopy(descriptor), init_weights(descriptor, np.random.default_rng(seed), dtype))

    def descriptor_bytes(self) -> bytes:
        return json.dumps(self.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @property
    def hash(self) -> str:
        h = hashlib.sha256(self.descriptor_bytes())
        for name in sorted(self.weights):
            arr = self.weights[name]
            h.update(name.encode("utf-8"))
            h.update(str(arr.dtype).encode())
            h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @property
    def num_params(self) -> int:
        return sum(v.size for k, v in self.weights.items() if not is_buffer(k))

    def param_counts_by_dtype(self) -> dict:
        counts = {}
        for k, v in self.weights.items():
            if not is_buffer(k):
                counts[str(v.dtype)] = counts.get(str(v.dtype), 0) + v.size
        return counts

    @property
    def slots(self) -> list:
        return adaptive_slots(self.descriptor)

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.descriptor)

    def tensors(self, trainable=False) -> dict:
        """Wrap the weights as tensors; frozen wrappers share read-only arrays."""
        out = {}
        for k, v in self.weights.items():
            if is_buffer(k):
                continue
            if trainable:
                out[k] = Tensor(v.copy(), requires_grad=True, name=k)
            else:
                view = v.view()
                view.flags.writeable = False
                t = Tensor.__new__(Tensor)
                t.data, t.requires_grad, t.grad, t.node, t.name = view, False, None, None, k
                out[k] = t
        return out

    def with_weights(self, tensors: dict, bn_stats: dict | None = None) -> "BaseModel":
        """A new base whose weights are taken from ``tensors`` (and batch-norm stats)."""
        w = {k: v.copy() for k, v in self.weights.items()}
        for k, t in tensors.items():
            w[k] = np.array(t.data, copy=True)
        for name, stats in (bn_stats or {}).items():
            w[f"{name}.running_mean"] = stats.mean.copy()
            w[f"{name}.running_var"] = stats.var.copy()
        return BaseModel(copy.deepcopy(self.descriptor), w)


class TaskNetwork:
    """A base model specialised to one task: gated deltas, batch norms and a head.

    ``base_tensors`` lets several task networks share one set of (possibly
    trainable) base tensors; by default the base is wrapped frozen.
    ``shared_bns`` likewise shares batch-norm modules (used when a multi-head
    backbone is trained without task-specific normalization).
    """

    def __init__(self, base: BaseModel, num_classes: int, *, task_id="task", tau=DEFAULT_TAU,
                 init_score=1.0, seed=0, base_tensors=None, shared_bns=None,
                 open_layers=None, gates="learned", head=None):
        if num_classes < 2:
            raise ConfigurationError(f"task {task_id!r}: need at least 2 classes, got {num_classes}")
        if gates not in ("learned", "fixed", "off"):
            raise ConfigurationError(f"unknown gate mode {gates!r}")
        self.base = base
        self.base_hash = base.hash
        self.descriptor = base.descriptor
        self.task_id = task_id
        self.num_classes = num_classes
        self.tau = float(tau)
        self.gates = gates
        self.base_tensors = base_tensors if base_tensors is not None else base.tensors(trainable=False)
        rng = np.random.default_rng(seed)

        slot_labels = [label for label, _ in base.slots]
        if open_layers is not None:
            unknown = set(open_layers) - set(slot_labels)
            if unknown:
                raise ConfigurationError(f"unknown adaptive layers {sorted(unknown)}")

        def score_for(label):
            if gates == "learned":
                return init_score
            if gates == "off":
                return 0.0
            return 1.0 if label in open_layers else 0.0

        self.adaptive: list = []
        self.bns: dict = {}
        self.blocks: list = []
        self._shared_bn = shared_bns is not None
        bt = self.base_tensors
        for spec in self.descriptor["layers"]:
            t, name = spec["type"], spec.get("name")
            if t in ("conv", "linear", "mlp"):
                weight, bias = bt[f"{name}.weight"], bt.get(f"{name}.bias")
                if _is_adaptive(spec):
                    layer = AdaptiveLayer(
                        name, t, weight, bias, tau=self.tau, init_score=score_for(name),
                        stride=spec.get("stride", 1), padding=spec.get("padding", 0),
                        trainable_score=(gates == "learned"),
                    )
                    self.adaptive.append(layer)
                    self.blocks.append(("adaptive", layer))
                else:
                    self.blocks.append(("linear", (weight, bias)))
            elif t == "attention":
                if _is_adaptive(spec):
                    parts = [
                        AdaptiveLayer(f"{name}.{p}", "projection" if p == "o" else "qkv", bt[f"{name}.{p}"],
                                      tau=self.tau, init_score=score_for(f"{name}.{p}"),
                                      trainable_score=(gates == "learned"))
                        for p in ATTENTION_PARTS
                    ]
                    self.adaptive.extend(parts)
                    self.blocks.append(("attention", AdaptiveAttention(*parts, residual=spec.get("residual", True))))
                else:
                    self.blocks.append(("plain_attention", ([bt[f"{name}.{p}"] for p in ATTENTION_PARTS],
                                                            spec.get("residual", True))))
            elif t == "bn":
                if shared_bns is not None:
                    bn = shared_bns[name]
                else:
                    w = base.weights
                    bn = TaskBatchNorm(name, w[f"{name}.gamma"], w[f"{name}.beta"],
                                       BatchNormStats(w[f"{name}.running_mean"].copy(), w[f"{name}.running_var"].copy()))
                self.bns[name] = bn
                self.blocks.append(("bn", bn))
            else:
                self.blocks.append((t, spec))

        fdim = base.feature_dim
        dtype = next(iter(base.weights.values())).dtype if base.weights else np.float32
        if head is None:
            bound = 1.0 / np.sqrt(fdim)
            head = (rng.uniform(-bound, bound, (fdim, num_classes)).astype(dtype), np.zeros(num_classes, dtype))
        hw, hb = head
        if hw.shape != (fdim, num_classes) or hb.shape != (num_classes,):
            raise DimensionError(f"head shapes {hw.shape}, {hb.shape} do not match ({fdim}, {num_classes})")
        self.head_weight = Tensor(np.array(hw, copy=True), requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.array(hb, copy=True), requires_grad=True, name="head.bias")

    # -- forward ---------------------------------------------------------

    def features(self, x, training=False, gated=True) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x, dtype=x.dtype if x.dtype in (np.float32, np.float64) else None)
        for kind, obj in self.blocks:
            if kind == "adaptive":
                h = obj(h, gated=gated)
            elif kind == "attention":
                h = obj(h, gated=gated)
            elif kind == "linear":
                h = ops.linear(h, *obj)
            elif kind == "plain_attention":
                mats, residual = obj
                y = ops.attention_single_head(h, *mats)
                h = ops.add(h, y) if residual else y
            elif kind == "bn":
                h = obj(h, training)
            elif kind == "relu":
                h = ops.relu(h)
            elif kind == "flatten":
                h = ops.flatten(h)
            elif kind == "tokens":
                n = h.shape[0]
                h = ops.reshape(h, (n, obj["num_tokens"], -1))
            elif kind == "token_mean":
                h = ops.mean(h, axis=1)
        return h

    def forward(self, x, training=False, gated=True) -> Tensor:
        """Logits. ``gated=False`` bypasses every delta and runs the plain base weights."""
        return ops.linear(self.features(x, training, gated), self.head_weight, self.head_bias)

    __call__ = forward

    def predict(self, x, batch_size=256) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    # -- parameters ------------------------------------------------------

    def task_parameters(self) -> list:
        """Trainable task-specific tensors: deltas, scores, batch norm, head."""
        params = []
        for layer in self.adaptive:
            params.extend(layer.parameters())
        if not self._shared_bn:
            for bn in self.bns.values():
                params.extend(bn.parameters())
        params.extend([self.head_weight, self.head_bias])
        return params

    def scores(self) -> list:
        return [layer.score for layer in self.adaptive]

    def score_vector(self) -> list:
        return [layer.score_value for layer in self.adaptive]

    def layer_map(self) -> list:
        return [layer.is_open for layer in self.adaptive]

    @property
    def num_adaptive(self) -> int:
        return len(self.adaptive)

    def num_trainable(self) -> int:
        return sum(p.size for p in self.task_parameters())

    def task_specific_params(self) -> dict:
        """Counts of what a saved task would add on top of the base."""
        deltas = sum(layer.num_delta_params for layer in self.adaptive if layer.is_open)
        bn = 0 if self._shared_bn else sum(b.num_params for b in self.bns.values())
        head = self.head_weight.size + self.head_bias.size
        return {"delta_params": deltas, "bn_params": bn, "head_params": head,
                "added_params": deltas + bn + head}

    def state_dict(self) -> dict:
        state = {}
        for layer in self.adaptive:
            state[f"{layer.name}.delta"] = layer.delta.data.copy()
            if layer.delta_bias is not None:
                state[f"{layer.name}.delta_bias"] = layer.delta_bias.data.copy()
            state[f"{layer.name}.score"] = layer.score.data.copy()
        for name, bn in self.bns.items():
            state[f"{name}.gamma"] = bn.gamma.data.copy()
            state[f"{name}.beta"] = bn.beta.data.copy()
            state[f"{name}.running_mean"] = bn.stats.mean.copy()
            state[f"{name}.running_var"] = bn.stats.var.copy()
        state["head.weight"] = self.head_weight.data.copy()
        state["head.bias"] = self.head_bias.data.copy()
        return state

    def load_state_dict(self, state: dict):
        for layer in self.adaptive:
            layer.delta.data = state[f"{layer.name}.delta"].copy()
            if layer.delta_bias is not None:
                layer.delta_bias.data = state[f"{layer.name}.delta_bias"].copy()
            layer.score.data = state[f"{layer.name}.score"].copy()
        for name, bn in self.bns.items():
            bn.gamma.data = state[f"{name}.gamma"].copy()
            bn.beta.data = state[f"{name}.beta"].copy()
            bn.stats.mean = state[f"{name}.running_mean"].copy()
            bn.stats.var = state[f"{name}.running_var"].copy()
        self.head_weight.data = state["head.weight"].copy()
        self.head_bias.data = state["head.bias"].copy()

"""Datasets: the TIMG binary format and the bundled synthetic task suite.

TIMG layout (little-endian)::

    b"TIMG" | u32 count | u32 C | u32 H | u32 W | u32 classes
    count x ( u16 label | C*H*W u8 pixels )

Pixels are scaled to ``[0, 1]`` on load.

The synthetic suite samples latent points from Gaussian clusters on a sphere
and renders each one into an ``H x W`` plane through a fixed random network.
Channel 0 holds the labelled example; every other channel blends it with an
unrelated distractor (``leak`` sets the share of the true example). Tasks:

``base``  class = cluster mod 4
``perm``  clusters are regrouped into classes differently (class = cluster // 4),
          so the class-forming layer has to change
``swap``  channels 0 and 1 are exchanged, a change only the first layer can undo
``both``  both perturbations at once
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from taps.errors import ConfigurationError, FormatError

TIMG_MAGIC = b"TIMG"
_HEADER = struct.Struct("<4sIIIII")
SUITE_TASKS = ("base", "perm", "swap", "both")
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    name: str
    split: str
    source: str
    num_classes: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ConfigurationError(f"{self.name}: {len(self.x)} inputs but {len(self.y)} labels")

    @property
    def count(self) -> int:
        return len(self.y)

    def __len__(self):
        return self.count

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])


def write_timg(path, dataset: Dataset):
    x = np.asarray(dataset.x)
    if x.ndim != 4:
        raise ConfigurationError(f"TIMG stores [n, C, H, W] images, got {x.shape}")
    n, c, h, w = x.shape
    pixels = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8).reshape(n, -1)
    labels = np.asarray(dataset.y)
    if n and (labels.min() < 0 or labels.max() >= dataset.num_classes or dataset.num_classes > 0xFFFF):
        raise ConfigurationError("labels must lie in [0, classes) and fit in u16")
    rec = np.zeros(n, dtype=np.dtype([("label", "<u2"), ("px", "u1", (c * h * w,))]))
    rec["label"] = labels
    rec["px"] = pixels
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TIMG_MAGIC, n, c, h, w, dataset.num_classes))
        fh.write(rec.tobytes())


def load_timg(path, split="train") -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}", len(raw))
    magic, n, c, h, w, classes = _HEADER.unpack_from(raw, 0)
    if magic != TIMG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TIMG_MAGIC!r}", 0)
    per = 2 + c * h * w
    expected = _HEADER.size + n * per
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated body, expected {expected} bytes, got {len(raw)}", len(raw)
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after {n} examples", expected)
    rec = np.frombuffer(raw, dtype=np.dtype([("label", "<u2"), ("px", "u1", (c * h * w,))]),
                        count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} >= {classes} classes", _HEADER.size + int(bad[0]) * per)
    x = (rec["px"].astype(np.float32) / np.float32(255.0)).reshape(n, c, h, w)
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(name, split, f"timg:{path}", int(classes), x, labels)


@dataclass(frozen=True)
class SyntheticSuite:
    """Deterministic family of related image-classification tasks."""

    seed: int = 0
    channels: int = 2
    height: int = 6
    width: int = 6
    latent_dim: int = 6
    clusters: int = 16
    classes: int = 4
    radius: float = 2.5
    spread: float = 0.5
    hidden: int = 32
    noise: float = 0.02
    leak: float = 0.5
    train_size: int = 1024
    test_size: int = 512

    @property
    def num_classes(self) -> int:
        return self.classes

    @property
    def input_shape(self) -> tuple:
        return (self.channels, self.height, self.width)

    def _generator(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC0FFEE]))
        centers = rng.standard_normal((self.clusters, self.latent_dim))
        centers *= self.radius / np.linalg.norm(centers, axis=1, keepdims=True)
        a = rng.standard_normal((self.latent_dim, self.hidden)) / np.sqrt(self.latent_dim) * 1.5
        b = rng.standard_normal(self.hidden) * 0.5
        c = rng.standard_normal((self.hidden, self.height * self.width)) * (2.5 / np.sqrt(self.hidden))
        return centers, a, b, c

    def labels_for(self, task, fine):
        if task in ("base", "swap"):
            return fine % self.classes
        if task in ("perm", "both"):
            return fine // (self.clusters // self.classes)
        raise ConfigurationError(f"unknown synthetic task {task!r}; choose from {SUITE_TASKS}")

    def dataset(self, task: str, split: str = "train", size: int | None = None) -> Dataset:
        if task not in SUITE_TASKS:
            raise ConfigurationError(f"unknown synthetic task {task!r}; choose from {SUITE_TASKS}")
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        if size is None:
            size = self.train_size if split == "train" else self.test_size
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, SUITE_TASKS.index(task) + 1, SPLITS.index(split) + 1])
        )
        centers, a, b, c = self._generator()
        fine = rng.permutation(np.arange(size) % self.clusters)
        # channel 0 renders the labelled example, the rest render unrelated distractors
        owners = [fine] + [rng.integers(0, self.clusters, size) for _ in range(self.channels - 1)]
        planes = []
        for own in owners:
            z = centers[own] + self.spread * rng.standard_normal((size, self.latent_dim))
            planes.append(1.0 / (1.0 + np.exp(-(np.tanh(z @ a + b) @ c))))
        for k in range(1, len(planes)):
            planes[k] = self.leak * planes[0] + (1.0 - self.leak) * planes[k]
        img = np.stack(planes, axis=1)
        img = img + self.noise * rng.standard_normal(img.shape)
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        x = (pixels.astype(np.float32) / np.float32(255.0)).reshape(size, *self.input_shape)
        if task in ("swap", "both"):
            x = np.ascontiguousarray(x[:, [1, 0] + list(range(2, self.channels))])
        y = self.labels_for(task, fine).astype(np.int64)
        return Dataset(task, split, f"synth:{task}:seed={self.seed}", self.num_classes, x, y)


def cnn_descriptor(input_shape=(2, 6, 6), width=4, features=8, classes=4) -> dict:
    """Three adaptive layers: two full-resolution convolutions and a linear bottleneck."""
    c, h, w = input_shape
    return {
        "input_shape": [c, h, w],
        "layers": [
            {"type": "conv", "name": "conv1", "in_channels": c, "out_channels": width, "kernel": 3, "stride": 1, "padding": 1},
            {"type": "bn", "name": "bn1", "num_features": width},
            {"type": "relu"},
            {"type": "conv", "name": "conv2", "in_channels": width, "out_channels": features, "kernel": 3, "stride": 1, "padding": 1},
            {"type": "bn", "name": "bn2", "num_features": features},
            {"type": "relu"},
            {"type": "flatten"},
            {"type": "linear", "name": "fc3", "in_features": features * h * w, "out_features": classes},
            {"type": "bn", "name": "bn3", "num_features": classes},
            {"type": "relu"},
        ],
    }


def vit_descriptor(input_shape=(2, 6, 6), num_tokens=6, dim=12) -> dict:
    """A one-block transformer: token embedding, gated attention, shared MLP, mean pooling."""
    flat = int(np.prod(input_shape))
    if flat % num_tokens:
        raise ConfigurationError(f"input of {flat} values cannot be split into {num_tokens} tokens")
    tok = flat // num_tokens
    return {
        "input_shape": list(input_shape),
        "layers": [
            {"type": "flatten"},
            {"type": "tokens", "num_tokens": num_tokens},
            {"type": "mlp", "name": "embed", "in_features": tok, "out_features": dim},
            {"type": "attention", "name": "attn", "dim": dim, "residual": True},
            {"type": "mlp", "name": "mlp1", "in_features": dim, "out_features": dim},
            {"type": "relu"},
            {"type": "token_mean"},
        ],
    }


def resolve_dataset(spec: str, split: str = "train", seed: int = 0) -> Dataset:
    """``synth:<task>`` or ``timg:<path>`` -> Dataset."""
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        return SyntheticSuite(seed=seed).dataset(rest, split)
    if kind == "timg":
        if not os.path.exists(rest):
            raise FileNotFoundError(rest)
        return load_timg(rest, split)
    raise ConfigurationError(f"dataset spec must be synth:<task> or timg:<path>, got {spec!r}")

"""Single-file store: one base model plus an append-only log of task deltas.

File layout (little-endian)::

    header    b"TAPS" | u32 format version | u32 n | n bytes JSON manifest
    base      u64 n | n bytes of base tensors | u32 crc32
    records   repeated TaskDelta records (see below)
    trailer   b"TIDX" | u64 base offset | u64 newest record offset | u32 count | u32 crc32

A record is::

    b"TDEL" | u64 previous record offset (0 = none) | u32 meta length | u64 blob length
    | meta JSON | blob | u32 crc32 over everything after the magic

Records form a backward chain from the trailer, so a save appends exactly one
record and rewrites the fixed-size trailer in place. Array payloads are raw
little-endian bytes described by ``{"key", "dtype", "shape", "offset"}``
entries in the JSON next to them.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from taps.errors import ConfigurationError, CorruptionError, NotFoundError, ProvenanceError
from taps.model import BaseModel, TaskNetwork, is_buffer

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None

MAGIC = b"TAPS"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sII")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
_TRAILER = struct.Struct("<4sQQII")
_TRAILER_MAGIC = b"TIDX"
_REC = struct.Struct("<4sQIQ")
_REC_MAGIC = b"TDEL"

DTYPE_BITS = {
    "bool": 8, "int8": 8, "uint8": 8,
    "int16": 16, "uint16": 16, "float16": 16, "bfloat16": 16,
    "int32": 32, "uint32": 32, "float32": 32,
    "int64": 64, "uint64": 64, "float64": 64,
}


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_arrays(arrays):
    """``[(key, array)]`` -> (table, blob) with arrays stored little-endian."""
    table, chunks, offset = [], [], 0
    for key, arr in arrays:
        arr = np.asarray(arr, order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"key": key, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def _unpack_arrays(table, blob, where):
    out = {}
    for entry in table:
        try:
            dt = np.dtype(entry["dtype"])
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptionError(f"malformed array entry {entry!r}", where) from exc
        count = int(np.prod(shape, dtype=np.int64))
        if start < 0 or start + count * dt.itemsize > len(blob):
            raise CorruptionError(f"array {entry['key']!r} runs past its blob", where)
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start)
        out[entry["key"]] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
    return out


def _dtype_name(dtype) -> str:
    if isinstance(dtype, str) and dtype in DTYPE_BITS:
        return dtype
    try:
        name = np.dtype(dtype).name
    except TypeError as exc:
        raise ConfigurationError(f"unknown dtype {dtype!r}") from exc
    return name


def normalized_count(counts) -> float:
    """Parameters expressed in 32-bit units: ``sum(count * bits / 32)``.

    ``counts`` maps a dtype (numpy dtype or name) to a parameter count;
    booleans count as 8 bits.
    """
    total = 0.0
    for dtype, n in dict(counts).items():
        name = _dtype_name(dtype)
        if name not in DTYPE_BITS:
            raise ConfigurationError(f"no bit width known for dtype {name!r}")
        if n < 0:
            raise ConfigurationError(f"negative parameter count {n} for {name}")
        total += n * DTYPE_BITS[name] / 32.0
    return total


@dataclass
class TaskDelta:
    """Everything a task adds on top of the shared base."""

    task_id: str
    base_hash: str
    num_classes: int
    tau: float
    layer_names: list
    scores: np.ndarray
    deltas: dict = field(default_factory=dict)   # label -> {"weight": arr, "bias": arr}
    bn: dict = field(default_factory=dict)       # name -> {"gamma", "beta", "running_mean", "running_var"}
    head_weight: np.ndarray = None
    head_bias: np.ndarray = None
    metadata: dict = field(default_factory=dict)
    version: int = 1

    @classmethod
    def from_network(cls, net: TaskNetwork, metadata=None) -> "TaskDelta":
        deltas = {}
        for layer in net.adaptive:
            if layer.is_open:
                entry = {"weight": layer.delta.data.copy()}
                if layer.delta_bias is not None:
                    entry["bias"] = layer.delta_bias.data.copy()
                deltas[layer.name] = entry
        bn = {}
        if not net._shared_bn:
            for name, b in net.bns.items():
                bn[name] = {"gamma": b.gamma.data.copy(), "beta": b.beta.data.copy(),
                            "running_mean": b.stats.mean.copy(), "running_var": b.stats.var.copy()}
        return cls(
            task_id=str(net.task_id), base_hash=net.base_hash, num_classes=net.num_classes, tau=net.tau,
            layer_names=[layer.name for layer in net.adaptive],
            scores=np.array([layer.score.data for layer in net.adaptive]).reshape(-1),
            deltas=deltas, bn=bn, head_weight=net.head_weight.data.copy(), head_bias=net.head_bias.data.copy(),
            metadata=dict(metadata or {}),
        )

    @property
    def layer_map(self) -> list:
        return [bool(s >= self.tau) for s in self.scores.tolist()]

    def counts_by_dtype(self) -> dict:
        """Stored task-specific parameters (deltas, BN affine, head) per dtype."""
        counts = {}

        def add(arr):
            name = arr.dtype.name
            counts[name] = counts.get(name, 0) + int(arr.size)

        for entry in self.deltas.values():
            for arr in entry.values():
                add(arr)
        for entry in self.bn.values():
            add(entry["gamma"])
            add(entry["beta"])
        add(self.head_weight)
        add(self.head_bias)
        return counts

    def param_counts(self) -> dict:
        delta = sum(int(a.size) for e in self.deltas.values() for a in e.values())
        bn = sum(int(e["gamma"].size + e["beta"].size) for e in self.bn.values())
        head = int(self.head_weight.size + self.head_bias.size)
        return {"delta_params": delta, "bn_params": bn, "head_params": head, "added_params": delta + bn + head}

    # -- encoding ---------------------------------------------------------

    def _arrays(self):
        arrays = [("scores", self.scores)]
        for label in sorted(self.deltas):
            for part in sorted(self.deltas[label]):
                arrays.append((f"delta/{label}/{part}", self.deltas[label][part]))
        for name in sorted(self.bn):
            for part in ("gamma", "beta", "running_mean", "running_var"):
                arrays.append((f"bn/{name}/{part}", self.bn[name][part]))
        arrays.append(("head/weight", self.head_weight))
        arrays.append(("head/bias", self.head_bias))
        return arrays

    def payload(self) -> tuple:
        """(meta JSON bytes, blob) without the version; equal payloads mean identical saves."""
        table, blob = _pack_arrays(self._arrays())
        meta = {
            "task_id": self.task_id, "base_hash": self.base_hash, "num_classes": int(self.num_classes),
            "tau": float(self.tau), "layer_names": list(self.layer_names),
            "metadata": json.loads(_json(self.metadata)),
            "arrays": table,
        }
        return meta, blob

    @classmethod
    def decode(cls, meta: dict, blob: bytes, where: int) -> "TaskDelta":
        arrays = _unpack_arrays(meta.get("arrays", []), blob, where)
        try:
            deltas, bn = {}, {}
            for key, arr in arrays.items():
                kind, *rest = key.split("/")
                if kind == "delta":
                    deltas.setdefault(rest[0], {})[rest[1]] = arr
                elif kind == "bn":
                    bn.setdefault(rest[0], {})[rest[1]] = arr
            return cls(
                task_id=meta["task_id"], base_hash=meta["base_hash"], num_classes=int(meta["num_classes"]),
                tau=float(meta["tau"]), layer_names=list(meta["layer_names"]), scores=arrays["scores"],
                deltas=deltas, bn=bn, head_weight=arrays["head/weight"], head_bias=arrays["head/bias"],
                metadata=meta.get("metadata", {}), version=int(meta["version"]),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise CorruptionError(f"task record is missing field {exc}", where) from exc


@contextlib.contextmanager
def _locked(fh, exclusive):
    if fcntl is None:
        yield
        return
    fcntl.flock(fh.fileno(), fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
    try:
        yield
    finally:
        fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _read_exact(fh, n, what, offset):
    data = fh.read(n)
    if len(data) != n:
        raise CorruptionError(f"truncated {what}: expected {n} bytes, got {len(data)}", offset)
    return data


class ModelStore:
    """A base model and its task deltas in one seekable file."""

    def __init__(self, path):
        self.path = os.fspath(path)
        if not os.path.exists(self.path):
            raise NotFoundError(f"no store at {self.path}")
        self._base = None
        with open(self.path, "rb") as fh, _locked(fh, exclusive=False):
            self._read_layout(fh)
        self.base  # checks the base checksum and hash up front

    # -- creation ---------------------------------------------------------

    @classmethod
    def create(cls, path, base: BaseModel, overwrite=False) -> "ModelStore":
        path = os.fspath(path)
        if os.path.exists(path) and not overwrite:
            raise ConfigurationError(f"{path} already exists")
        names = sorted(base.weights)
        table, blob = _pack_arrays([(n, base.weights[n]) for n in names])
        manifest = _json({"descriptor": base.descriptor, "base_hash": base.hash, "tensors": table})
        head = _HEAD.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest
        base_offset = len(head)
        body = _U64.pack(len(blob)) + blob + _U32.pack(zlib.crc32(blob))
        with open(path, "wb") as fh:
            fh.write(head + body + _trailer(base_offset, 0, 0))
            fh.flush()
            os.fsync(fh.fileno())
        return cls(path)

    @classmethod
    def open(cls, path) -> "ModelStore":
        return cls(path)

    # -- reading ----------------------------------------------------------

    def _read_layout(self, fh):
        fh.seek(0)
        size = os.fstat(fh.fileno()).st_size
        raw = _read_exact(fh, _HEAD.size, "header", 0)
        magic, version, mlen = _HEAD.unpack(raw)
        if magic != MAGIC:
            raise CorruptionError(f"{self.path}: bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != FORMAT_VERSION:
            raise CorruptionError(f"{self.path}: unsupported format version {version}", 4)
        mraw = _read_exact(fh, mlen, "manifest", _HEAD.size)
        try:
            manifest = json.loads(mraw.decode("utf-8"))
            self._descriptor = manifest["descriptor"]
            self.base_hash = manifest["base_hash"]
            self._tensor_table = manifest["tensors"]
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise CorruptionError(f"{self.path}: unreadable manifest ({exc})", _HEAD.size) from exc
        if size < _TRAILER.size:
            raise CorruptionError(f"{self.path}: file too short for a trailer", size)
        tpos = size - _TRAILER.size
        fh.seek(tpos)
        traw = fh.read(_TRAILER.size)
        tmagic, base_off, last, count, crc = _TRAILER.unpack(traw)
        if tmagic != _TRAILER_MAGIC:
            raise CorruptionError(f"{self.path}: missing trailer (found {tmagic!r})", tpos)
        if zlib.crc32(traw[:-4]) != crc:
            raise CorruptionError(f"{self.path}: trailer checksum mismatch", tpos)
        if base_off != _HEAD.size + mlen:
            raise CorruptionError(f"{self.path}: trailer points at base offset {base_off}", tpos)
        fh.seek(base_off)
        blen = _U64.unpack(_read_exact(fh, 8, "base length", base_off))[0]
        self._base_blob_offset = base_off + 8
        self._records_start = self._base_blob_offset + blen + 4
        if self._records_start > tpos:
            raise CorruptionError(f"{self.path}: base blob of {blen} bytes overruns the file", base_off)
        self._trailer_offset = tpos
        self._base_offset = base_off
        self._base_len = blen
        self._scan_records(fh, last, count)

    def _scan_records(self, fh, last, count):
        entries = []
        pos = last
        seen = 0
        while pos:
            if not self._records_start <= pos < self._trailer_offset or seen >= count:
                raise CorruptionError(f"{self.path}: record pointer {pos} out of range", pos)
            meta, blob_off, blob_len, prev = self._read_record_head(fh, pos)
            if prev >= pos:
                raise CorruptionError(f"{self.path}: record chain loops back to {prev}", pos)
            entries.append((pos, meta, blob_off, blob_len))
            pos = prev
            seen += 1
        if seen != count:
            raise CorruptionError(f"{self.path}: trailer lists {count} records, found {seen}", self._trailer_offset)
        entries.reverse()
        self._records = entries
        self._latest = {}
        self._order = []
        for i, (_, meta, _, _) in enumerate(entries):
            tid = meta["task_id"]
            if tid not in self._latest:
                self._order.append(tid)
            self._latest[tid] = i

    def _read_record_head(self, fh, pos):
        fh.seek(pos)
        raw = _read_exact(fh, _REC.size, "record header", pos)
        magic, prev, mlen, blen = _REC.unpack(raw)
        if magic != _REC_MAGIC:
            raise CorruptionError(f"{self.path}: bad record magic {magic!r}", pos)
        end = pos + _REC.size + mlen + blen + 4
        if end > self._trailer_offset:
            raise CorruptionError(f"{self.path}: record of {end - pos} bytes overruns the file", pos)
        mraw = _read_exact(fh, mlen, "record metadata", pos + _REC.size)
        try:
            meta = json.loads(mraw.decode("utf-8"))
            meta["task_id"]
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise CorruptionError(f"{self.path}: unreadable record metadata ({exc})", pos + _REC.size) from exc
        return meta, pos + _REC.size + mlen, blen, prev

    def _read_record(self, index, fh=None) -> TaskDelta:
        pos, meta, blob_off, blob_len = self._records[index]
        if fh is None:
            with open(self.path, "rb") as own, _locked(own, exclusive=False):
                return self._read_record(index, own)
        fh.seek(pos + 4)
        body = _read_exact(fh, blob_off + blob_len - pos - 4, "record", pos)
        crc = _U32.unpack(_read_exact(fh, 4, "record checksum", blob_off + blob_len))[0]
        if zlib.crc32(body) != crc:
            raise CorruptionError(f"{self.path}: checksum mismatch in record for task {meta['task_id']!r}", pos)
        blob = body[len(body) - blob_len:]
        return TaskDelta.decode(meta, blob, pos)

    @property
    def base(self) -> BaseModel:
        if self._base is None:
            with open(self.path, "rb") as fh, _locked(fh, exclusive=False):
                fh.seek(self._base_blob_offset)
                blob = _read_exact(fh, self._base_len, "base blob", self._base_blob_offset)
                crc = _U32.unpack(_read_exact(fh, 4, "base checksum", self._base_blob_offset + self._base_len))[0]
            if zlib.crc32(blob) != crc:
                raise CorruptionError(f"{self.path}: base blob checksum mismatch", self._base_blob_offset)
            weights = _unpack_arrays(self._tensor_table, blob, self._base_blob_offset)
            base = BaseModel(self._descriptor, weights)
            if base.hash != self.base_hash:
                raise CorruptionError(f"{self.path}: base contents do not match the recorded hash",
                                      self._base_blob_offset)
            self._base = base
        return self._base

    def verify(self):
        """Read back every record, raising CorruptionError on the first bad one."""
        for i in range(len(self._records)):
            self._read_record(i)

    def tasks(self) -> list:
        return list(self._order)

    def versions(self, task_id) -> list:
        return [int(m["version"]) for _, m, _, _ in self._records if m["task_id"] == task_id]

    def __contains__(self, task_id):
        return task_id in self._latest

    def load_task(self, task_id, version=None) -> TaskDelta:
        if task_id not in self._latest:
            raise NotFoundError(f"task {task_id!r} is not in {self.path}; stored tasks: {self.tasks()}")
        if version is None:
            return self._read_record(self._latest[task_id])
        for i, (_, meta, _, _) in enumerate(self._records):
            if meta["task_id"] == task_id and int(meta["version"]) == int(version):
                return self._read_record(i)
        raise NotFoundError(f"task {task_id!r} has no version {version}")

    # -- writing ----------------------------------------------------------

    def save_task(self, net: TaskNetwork, metadata=None) -> TaskDelta:
        """Append ``net``'s task-specific state.

        Saving content identical to the task's newest record is a no-op;
        different content under an existing id becomes a new version.
        """
        if net.base_hash != self.base_hash:
            raise ProvenanceError(
                f"task {net.task_id!r} was trained against base {net.base_hash[:12]}, "
                f"this store holds {self.base_hash[:12]}"
            )
        delta = TaskDelta.from_network(net, metadata)
        return self.save_delta(delta)

    def save_delta(self, delta: TaskDelta) -> TaskDelta:
        if delta.base_hash != self.base_hash:
            raise ProvenanceError(f"delta for {delta.task_id!r} references base {delta.base_hash[:12]}")
        meta, blob = delta.payload()
        with open(self.path, "r+b") as fh, _locked(fh, exclusive=True):
            # another writer may have appended since this handle was opened
            self._read_layout(fh)
            version = 1
            if delta.task_id in self._latest:
                idx = self._latest[delta.task_id]
                prev_meta = dict(self._records[idx][1])
                current = self._read_record(idx, fh)
                cur_meta, cur_blob = current.payload()
                if cur_meta == meta and cur_blob == blob:
                    return current
                version = int(prev_meta["version"]) + 1
                warnings.warn(
                    f"task {delta.task_id!r} already stored; writing version {version}", stacklevel=2
                )
            meta = dict(meta, version=version)
            mraw = _json(meta)
            last = self._records[-1][0] if self._records else 0
            body = _U64.pack(last) + _U32.pack(len(mraw)) + _U64.pack(len(blob)) + mraw + blob
            record = _REC_MAGIC + body + _U32.pack(zlib.crc32(body))
            pos = self._trailer_offset
            fh.seek(pos)
            fh.write(record + _trailer(self._base_offset, pos, len(self._records) + 1))
            fh.truncate()
            fh.flush()
            os.fsync(fh.fileno())
            self._read_layout(fh)
        delta.version = version
        return delta

    # -- composition ------------------------------------------------------

    def compose(self, task_id, version=None) -> TaskNetwork:
        """Rebuild the task network: base weights plus stored deltas, task BN and head."""
        delta = self.load_task(task_id, version)
        idx = self._latest[task_id] if version is None else None
        where = self._records[idx][0] if idx is not None else 0
        return compose_delta(self.base, delta, where)

    def param_report(self) -> dict:
        return param_report(self)


def _trailer(base_offset, last, count) -> bytes:
    raw = _TRAILER.pack(_TRAILER_MAGIC, base_offset, last, count, 0)[:-4]
    return raw + _U32.pack(zlib.crc32(raw))


def compose_delta(base: BaseModel, delta: TaskDelta, where=0) -> TaskNetwork:
    if delta.base_hash != base.hash:
        raise ProvenanceError(f"delta for {delta.task_id!r} was not trained against this base")
    dtype = next(iter(base.weights.values())).dtype
    net = TaskNetwork(base, delta.num_classes, task_id=delta.task_id, tau=delta.tau,
                      head=(delta.head_weight.astype(dtype), delta.head_bias.astype(dtype)))
    labels = [layer.name for layer in net.adaptive]
    if labels != list(delta.layer_names) or len(delta.scores) != len(labels):
        raise CorruptionError(
            f"task {delta.task_id!r} lists layers {delta.layer_names}, base has {labels}", where
        )
    by_name = {layer.name: layer for layer in net.adaptive}
    for label, entry in delta.deltas.items():
        layer = by_name.get(label)
        if layer is None:
            raise CorruptionError(f"task {delta.task_id!r} has a delta for unknown base layer {label!r}", where)
        if entry["weight"].shape != layer.delta.shape:
            raise CorruptionError(
                f"delta {label!r} has shape {entry['weight'].shape}, base layer is {layer.delta.shape}", where
            )
        layer.delta.data = entry["weight"].astype(dtype)
        if layer.delta_bias is not None and "bias" in entry:
            layer.delta_bias.data = entry["bias"].astype(dtype)
    for layer, s in zip(net.adaptive, delta.scores):
        layer.score.data = np.asarray(s, dtype=layer.score.dtype)
    for name, entry in delta.bn.items():
        if name not in net.bns:
            raise CorruptionError(f"task {delta.task_id!r} has batch norm {name!r} unknown to the base", where)
        bn = net.bns[name]
        bn.gamma.data = entry["gamma"].astype(dtype)
        bn.beta.data = entry["beta"].astype(dtype)
        bn.stats.mean = entry["running_mean"].astype(dtype)
        bn.stats.var = entry["running_var"].astype(dtype)
    return net


def base_counts_by_dtype(base: BaseModel) -> dict:
    counts = {}
    for k, v in base.weights.items():
        if not is_buffer(k):
            counts[v.dtype.name] = counts.get(v.dtype.name, 0) + int(v.size)
    return counts


def report_from_deltas(base: BaseModel, deltas) -> dict:
    """Parameter and layer accounting for a base and its task deltas."""
    deltas = list(deltas)
    if not deltas:
        raise ConfigurationError("no tasks saved; nothing to report")
    base_counts = base_counts_by_dtype(base)
    base_params = sum(base_counts.values())
    base_norm = normalized_count(base_counts)
    if base_params == 0:
        raise ConfigurationError("base model has no parameters")
    rows, total_added, total_added_norm = [], 0, 0.0
    for d in deltas:
        counts = d.param_counts()
        added_norm = normalized_count(d.counts_by_dtype())
        lmap = d.layer_map
        n_open = sum(lmap)
        rows.append({
            "task_id": d.task_id,
            "version": d.version,
            "added_params": counts["added_params"],
            "added_param_pct": 100.0 * counts["added_params"] / base_params,
            "delta_params": counts["delta_params"],
            "bn_params": counts["bn_params"],
            "head_params": counts["head_params"],
            "normalized_added_params": added_norm,
            "task_specific_layers": n_open,
            "layer_pct": 100.0 * n_open / len(lmap) if lmap else 0.0,
            "multiplier": (base_params + counts["added_params"]) / base_params,
            "normalized_multiplier": (base_norm + added_norm) / base_norm,
            "layer_map": lmap,
            "layer_names": list(d.layer_names),
            "scores": [float(s) for s in d.scores.tolist()],
        })
        total_added += counts["added_params"]
        total_added_norm += added_norm
    return {
        "base_hash": base.hash,
        "layer_names": [label for label, _ in base.slots],
        "layer_kinds": [kind for _, kind in base.slots],
        "base_params": base_params,
        "normalized_base_params": base_norm,
        "multiplier": (base_params + total_added) / base_params,
        "normalized_multiplier": (base_norm + total_added_norm) / base_norm,
        "tasks": rows,
    }


def param_report(store: ModelStore) -> dict:
    tasks = store.tasks()
    if not tasks:
        raise ConfigurationError(f"{store.path} holds no tasks; nothing to report")
    return report_from_deltas(store.base, [store.load_task(t) for t in tasks])

import os
import struct
import warnings
import zlib

import numpy as np
import pytest

from taps.data import SyntheticSuite, cnn_descriptor
from taps.errors import ConfigurationError, CorruptionError, NotFoundError, ProvenanceError
from taps.model import BaseModel, TaskNetwork
from taps.store import ModelStore, TaskDelta, compose_delta, normalized_count, param_report, report_from_deltas

TRAILER = 28  # b"TIDX" + u64 + u64 + u32 + u32


def perturbed_net(base, task_id="t", seed=0, closed=()):
    rng = np.random.default_rng(seed)
    net = TaskNetwork(base, 4, task_id=task_id, seed=seed)
    for layer in net.adaptive:
        layer.delta.data = rng.standard_normal(layer.delta.shape).astype(np.float32) * 0.1
        if layer.delta_bias is not None:
            layer.delta_bias.data = rng.standard_normal(layer.delta_bias.shape).astype(np.float32)
        layer.score.data = np.asarray(0.02 if layer.name in closed else rng.uniform(0.2, 1.5), np.float32)
    for bn in net.bns.values():
        bn.gamma.data = bn.gamma.data + rng.standard_normal(bn.gamma.shape).astype(np.float32)
        bn.stats.mean = rng.standard_normal(bn.stats.mean.shape).astype(np.float32)
    return net


@pytest.fixture
def base():
    return BaseModel.random(cnn_descriptor(), seed=0)


@pytest.fixture
def x():
    return SyntheticSuite(seed=0).dataset("base", "test", 64).x


def test_create_and_reopen(tmp_path, base):
    store = ModelStore.create(tmp_path / "m.taps", base)
    again = ModelStore(tmp_path / "m.taps")
    assert again.base_hash == base.hash and again.tasks() == []
    for k, v in base.weights.items():
        assert again.base.weights[k].tobytes() == v.tobytes()
    with pytest.raises(ConfigurationError):
        ModelStore.create(tmp_path / "m.taps", base)
    assert store.path == again.path


def test_missing_store(tmp_path):
    with pytest.raises(NotFoundError):
        ModelStore(tmp_path / "absent.taps")


def test_round_trip_bit_exact(tmp_path, base, x):
    net = perturbed_net(base, closed=("conv2",))
    store = ModelStore.create(tmp_path / "m.taps", base)
    store.save_task(net, {"lambda": 0.5})
    composed = ModelStore(tmp_path / "m.taps").compose("t")
    assert composed(x).data.tobytes() == net(x).data.tobytes()
    assert composed.layer_map() == [True, False, True]
    delta = store.load_task("t")
    assert set(delta.deltas) == {"conv1", "fc3"}
    assert delta.metadata == {"lambda": 0.5}


def test_unknown_task(tmp_path, base):
    store = ModelStore.create(tmp_path / "m.taps", base)
    with pytest.raises(NotFoundError, match="nope"):
        store.load_task("nope")


def test_provenance(tmp_path, base):
    store = ModelStore.create(tmp_path / "m.taps", base)
    other = BaseModel.random(cnn_descriptor(), seed=1)
    with pytest.raises(ProvenanceError):
        store.save_task(perturbed_net(other))


def test_identical_save_is_noop_and_change_versions(tmp_path, base):
    path = tmp_path / "m.taps"
    store = ModelStore.create(path, base)
    net = perturbed_net(base)
    store.save_task(net)
    size = os.path.getsize(path)
    store.save_task(net)
    assert os.path.getsize(path) == size and store.versions("t") == [1]
    net.head_bias.data = net.head_bias.data + 1
    with pytest.warns(UserWarning, match="version 2"):
        store.save_task(net)
    assert store.versions("t") == [1, 2]
    assert store.load_task("t").version == 2
    assert store.load_task("t", version=1).head_bias.tobytes() != net.head_bias.data.tobytes()
    with pytest.raises(NotFoundError):
        store.load_task("t", version=3)


def test_growth_is_one_record(tmp_path, base):
    path = tmp_path / "m.taps"
    store = ModelStore.create(path, base)
    for i in range(3):
        before = path.read_bytes()
        store.save_task(perturbed_net(base, task_id=f"t{i}", seed=i))
        after = path.read_bytes()
        # everything before the old trailer is untouched
        assert after[:len(before) - TRAILER] == before[:-TRAILER]
        rec = len(before) - TRAILER
        magic, _, mlen, blen = struct.unpack_from("<4sQIQ", after, rec)
        assert magic == b"TDEL"
        assert len(after) - len(before) == 24 + mlen + blen + 4
    assert ModelStore(path).tasks() == ["t0", "t1", "t2"]


def corrupt(path, offset, value=None):
    raw = bytearray(path.read_bytes())
    raw[offset] = (raw[offset] ^ 0xFF) if value is None else value
    path.write_bytes(bytes(raw))


def test_corrupt_magic(tmp_path, base):
    path = tmp_path / "m.taps"
    ModelStore.create(path, base)
    corrupt(path, 0)
    with pytest.raises(CorruptionError, match="offset 0") as info:
        ModelStore(path)
    assert info.value.offset == 0


def test_corrupt_record_blob(tmp_path, base):
    path = tmp_path / "m.taps"
    store = ModelStore.create(path, base)
    rec = os.path.getsize(path) - TRAILER
    store.save_task(perturbed_net(base))
    corrupt(path, os.path.getsize(path) - TRAILER - 10)
    reopened = ModelStore(path)
    with pytest.raises(CorruptionError, match="checksum") as info:
        reopened.load_task("t")
    assert info.value.offset == rec
    with pytest.raises(CorruptionError):
        reopened.verify()


def test_corrupt_base_blob(tmp_path, base):
    path = tmp_path / "m.taps"
    ModelStore.create(path, base)
    size = os.path.getsize(path)
    corrupt(path, size - TRAILER - 20)
    with pytest.raises(CorruptionError, match="base") as info:
        ModelStore(path)
    assert 0 < info.value.offset < size


def test_truncated_file(tmp_path, base):
    path = tmp_path / "m.taps"
    store = ModelStore.create(path, base)
    store.save_task(perturbed_net(base))
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CorruptionError) as info:
        ModelStore(path)
    assert info.value.offset == len(raw) - 7 - TRAILER


def test_trailer_count_mismatch(tmp_path, base):
    path = tmp_path / "m.taps"
    store = ModelStore.create(path, base)
    store.save_task(perturbed_net(base))
    raw = bytearray(path.read_bytes())
    tpos = len(raw) - TRAILER
    struct.pack_into("<I", raw, tpos + 20, 5)
    struct.pack_into("<I", raw, tpos + 24, zlib.crc32(bytes(raw[tpos:tpos + 24])))
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError, match="5 records") as info:
        ModelStore(path)
    assert info.value.offset == tpos


def test_compose_rejects_mismatched_delta(base):
    delta = TaskDelta.from_network(perturbed_net(base))
    delta.deltas["conv1"]["weight"] = np.zeros((1, 1), np.float32)
    with pytest.raises(CorruptionError, match="shape"):
        compose_delta(base, delta, where=123)
    delta.deltas = {"ghost": {"weight": np.zeros(1, np.float32)}}
    with pytest.raises(CorruptionError, match="ghost"):
        compose_delta(base, delta)


# -- accounting -----------------------------------------------------------


def test_normalized_count_examples():
    assert normalized_count({"float32": 100}) == 100
    assert normalized_count({"bool": 100}) == 25
    assert normalized_count({np.float32: 50, np.bool_: 32}) == 58
    assert normalized_count({"float16": 10, "float64": 1, "int8": 4}) == 5 + 2 + 1
    with pytest.raises(ConfigurationError):
        normalized_count({"complex64": 1})


def test_report_on_trained_shapes(tmp_path, base):
    store = ModelStore.create(tmp_path / "m.taps", base)
    store.save_task(perturbed_net(base, "a", closed=("conv1", "conv2")))
    rep = param_report(store)
    row = rep["tasks"][0]
    assert rep["base_params"] == 1560
    assert row["delta_params"] == 1156 and row["bn_params"] == 32 and row["head_params"] == 20
    assert row["added_params"] == 1208
    assert row["layer_map"] == [False, False, True]
    assert row["task_specific_layers"] == 1 and abs(row["layer_pct"] - 100 / 3) < 1e-12
    assert rep["multiplier"] == (1560 + 1208) / 1560


def test_report_needs_tasks(tmp_path, base):
    store = ModelStore.create(tmp_path / "m.taps", base)
    with pytest.raises(ConfigurationError):
        param_report(store)
    with pytest.raises(ConfigurationError):
        report_from_deltas(base, [])


def test_concurrent_saves_keep_every_record(tmp_path, base):
    path = tmp_path / "m.taps"
    ModelStore.create(path, base)
    a, b = ModelStore(path), ModelStore(path)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a.save_task(perturbed_net(base, "a"))
        b.save_task(perturbed_net(base, "b"))
    assert ModelStore(path).tasks() == ["a", "b"]

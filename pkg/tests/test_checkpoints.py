import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccmlab import checkpoints as ck
from ccmlab.checkpoints import Checkpoint, CorruptCheckpoint, LineageError, VersionMismatch
from ccmlab.weights import SchemaMismatch, WeightSet, flatten, linear_combination, unflatten

from conftest import lineage_triplet, random_weights

names = st.text("abcdefgh._0123", min_size=1, max_size=8)
shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)


@given(st.dictionaries(names, shapes, min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_flatten_roundtrip(schema, seed):
    r = np.random.default_rng(seed)
    ws = WeightSet({k: r.standard_normal(s) for k, s in schema.items()})
    v, sch = flatten(ws)
    assert v.size == ws.size
    assert unflatten(v, sch) == ws


def test_unflatten_length_mismatch(rng):
    v, sch = flatten(random_weights(rng))
    with pytest.raises(SchemaMismatch):
        unflatten(v[:-1], sch)


def test_weightset_arithmetic(rng):
    a, b = random_weights(rng), random_weights(rng)
    assert np.allclose(flatten((a + b) - b)[0], flatten(a)[0], rtol=0, atol=1e-14)
    assert np.float64(2.0) * a == a * 2.0
    assert -a == a * -1.0
    with pytest.raises(SchemaMismatch):
        a + WeightSet({"z": np.zeros(1)})
    assert linear_combination([(0.5, a), (0.5, b)]) == unflatten(0.5 * flatten(a)[0] + 0.5 * flatten(b)[0], a.schema)


def test_weightset_rejects_nonfinite():
    with pytest.raises(ValueError):
        WeightSet({"a": np.array([np.inf])})


def test_save_load_bitwise(tmp_path, triplet):
    anchor, low, _ = triplet
    for c in (anchor, low):
        p = tmp_path / f"{c.role}.ckpt"
        h = ck.save(c, p)
        back = ck.load(p)
        assert back == c and h == c.content_hash == back.content_hash


def test_file_is_deterministic(tmp_path, triplet):
    anchor = triplet[0]
    ck.save(anchor, tmp_path / "a")
    ck.save(anchor, tmp_path / "b")
    assert open(tmp_path / "a", "rb").read() == open(tmp_path / "b", "rb").read()


def test_truncation_and_bitflip_detected(triplet):
    blob = ck.to_bytes(triplet[0])
    with pytest.raises(CorruptCheckpoint):
        ck.from_bytes(blob[: len(blob) // 2])
    flipped = bytearray(blob)
    flipped[100] ^= 1
    with pytest.raises(CorruptCheckpoint):
        ck.from_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        ck.from_bytes(b"NOTCKPT\0" + blob[8:])


def test_version_mismatch(triplet):
    blob = bytearray(ck.to_bytes(triplet[0]))
    blob[8:12] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatch):
        ck.from_bytes(bytes(blob))


def test_lineage_checks(triplet):
    anchor, low, high = triplet
    ck.assert_same_lineage(low, high)
    ck.assert_same_lineage(anchor, low)
    other = lineage_triplet(seed=5)
    with pytest.raises(LineageError, match="anchor"):
        ck.assert_same_lineage(low, other[2])
    odd = Checkpoint(high.weights, {k: v + 1 for k, v in high.buffers.items()}, high.config, high.lineage)
    with pytest.raises(LineageError, match="normalizer"):
        ck.assert_same_lineage(low, odd)
    small = Checkpoint(WeightSet({"a": np.zeros(2)}), low.buffers, {}, {"role": "anchor"})
    with pytest.raises(LineageError, match="schema"):
        ck.assert_same_lineage(low, small)


def test_role_validation(triplet):
    w = triplet[0].weights
    with pytest.raises(ck.CheckpointError):
        Checkpoint(w, {}, {}, {"role": "endpoint-low"})
    with pytest.raises(ck.CheckpointError):
        Checkpoint(w, {}, {}, {"role": "merged", "alpha": 0.5})
    with pytest.raises(ck.CheckpointError):
        Checkpoint(w, {}, {}, {"role": "wizard"})


def test_content_hash_ignores_metadata(triplet):
    a = triplet[0]
    b = Checkpoint(a.weights, a.buffers, {"note": "x"}, {"role": "baseline", "anchor": "abc"})
    assert a.content_hash == b.content_hash and a != b

"""Block-sparse diffs: byte layout, losslessness, families, and fallback."""
from types import SimpleNamespace

import numpy as np
import pytest

from roundkv.core import CacheBlockConfig, LayeredKv, kv_dense_nbytes
from roundkv.diffstore import (
    BlockSparseDiff,
    DiffStore,
    HintSoundnessError,
    LayerDiff,
    MalformedDiffError,
    MasterEntry,
    PinnedMasterError,
    deserialize_diff,
    diff_decode_dense,
    encode_diff,
    family_cost_from_ratio,
    serialize_diff,
)

from conftest import perturb_blocks, random_kv

BLOCKS = CacheBlockConfig(block_size=32)


def _random_kv(rng, num_tokens, **kw):
    return random_kv(rng, num_tokens, **kw)


def _perturb_blocks(rng, master, block_ids):
    return perturb_blocks(rng, master, BLOCKS, block_ids)


# ---------------------------------------------------------------------------
# worked byte counts


def test_two_changed_blocks_per_layer_byte_counts():
    rng = np.random.default_rng(11)
    master = _random_kv(rng, 640)
    mirror, hints = _perturb_blocks(rng, master, [3, 17])

    dense = master.dense_nbytes
    assert dense == kv_dense_nbytes(640, 4, 2, 8) == 327_680

    diff = encode_diff(master, mirror, hints, BLOCKS)
    assert diff.changed_blocks_per_layer == [2, 2, 2, 2]
    # 2 blocks * 32 tokens * 2 heads * 8 dims * 4 bytes, K and V, 4 layers
    assert diff.payload_nbytes == 32_768
    assert dense / diff.payload_nbytes == 10.0

    wire = serialize_diff(diff)
    # header 24 + 4 layers * (4 count + 1 flag + 2*4 indices) + 4 valid_len
    assert len(wire) - diff.payload_nbytes == 80
    assert 9.9 <= dense / len(wire) <= 10.0


def test_empty_diff_is_metadata_only():
    rng = np.random.default_rng(12)
    master = _random_kv(rng, 640)
    diff = encode_diff(master, master.copy(), np.empty(0, dtype=np.int64), BLOCKS)
    assert diff.payload_nbytes == 0
    restored = diff_decode_dense(master, diff)
    assert np.array_equal(restored.k, master.k)
    assert np.array_equal(restored.v, master.v)


# ---------------------------------------------------------------------------
# lossless roundtrips


@pytest.mark.parametrize("num_tokens", [64, 70, 161, 640])
def test_serialize_roundtrip_is_bit_identical(num_tokens):
    rng = np.random.default_rng(num_tokens)
    master = _random_kv(rng, num_tokens)
    nb = BLOCKS.num_blocks(num_tokens)
    picks = sorted(rng.choice(nb, size=min(3, nb), replace=False).tolist())
    mirror, hints = _perturb_blocks(rng, master, picks)

    diff = encode_diff(master, mirror, hints, BLOCKS)
    back = deserialize_diff(serialize_diff(diff))
    assert back.total_tokens == num_tokens
    for a, b in zip(diff.layers, back.layers):
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.k_blocks, b.k_blocks)
        assert np.array_equal(a.v_blocks, b.v_blocks)

    restored = diff_decode_dense(master, back)
    assert np.array_equal(restored.k, mirror.k)
    assert np.array_equal(restored.v, mirror.v)
    assert np.array_equal(restored.positions, mirror.positions)


def test_partial_final_block_pads_and_restores():
    rng = np.random.default_rng(21)
    master = _random_kv(rng, 70)  # 3 blocks, final holds 6 rows
    mirror, hints = _perturb_blocks(rng, master, [2])
    diff = encode_diff(master, mirror, hints, BLOCKS)
    assert diff.layers[0].k_blocks.shape[1] == 32  # padded to full block
    assert np.all(diff.layers[0].k_blocks[0, 6:] == 0.0)
    restored = diff_decode_dense(master, deserialize_diff(serialize_diff(diff)))
    assert np.array_equal(restored.k, mirror.k)
    assert np.array_equal(restored.v, mirror.v)


def test_single_row_change_stores_whole_block():
    rng = np.random.default_rng(22)
    master = _random_kv(rng, 128)
    mirror = master.copy()
    mirror.k[2, 40, 1, 3] += 1.0
    diff = encode_diff(master, mirror, np.array([40]), BLOCKS)
    assert diff.changed_blocks_per_layer == [0, 0, 1, 0]
    assert diff.layers[2].indices.tolist() == [1]
    restored = diff_decode_dense(master, diff)
    assert np.array_equal(restored.k, mirror.k)


def test_hinted_but_identical_blocks_are_not_stored():
    rng = np.random.default_rng(23)
    master = _random_kv(rng, 128)
    mirror, hints = _perturb_blocks(rng, master, [1])
    wide_hints = np.arange(128)  # hint everything; only block 1 changed
    diff = encode_diff(master, mirror, wide_hints, BLOCKS)
    assert diff.changed_blocks_per_layer == [1, 1, 1, 1]
    assert diff.layers[0].indices.tolist() == [1]


def test_difference_outside_hints_is_an_error():
    rng = np.random.default_rng(24)
    master = _random_kv(rng, 128)
    mirror, hints = _perturb_blocks(rng, master, [1])
    mirror.v[0, 100, 0, 0] += 0.5  # block 3, never hinted
    with pytest.raises(HintSoundnessError, match="layer 0 block 3"):
        encode_diff(master, mirror, hints, BLOCKS)


def test_encode_rejects_mismatched_shapes_and_positions():
    rng = np.random.default_rng(25)
    master = _random_kv(rng, 64)
    other = _random_kv(rng, 96)
    with pytest.raises(ValueError, match="shape"):
        encode_diff(master, other, np.empty(0, dtype=np.int64), BLOCKS)
    moved = _random_kv(rng, 64, start=5)
    with pytest.raises(ValueError, match="positions"):
        encode_diff(master, moved, np.empty(0, dtype=np.int64), BLOCKS)


# ---------------------------------------------------------------------------
# escape form: separate K and V index lists


def test_separate_index_lists_roundtrip_and_decode():
    rng = np.random.default_rng(31)
    master = _random_kv(rng, 96)  # 3 blocks
    bs, h, d = 32, 2, 8
    k_payload = rng.standard_normal((1, bs, h, d)).astype(np.float32)
    v_payload = rng.standard_normal((2, bs, h, d)).astype(np.float32)
    layers = [
        LayerDiff(np.array([1]), k_payload, v_payload, v_indices=np.array([0, 2]))
    ]
    layers += [
        LayerDiff(
            np.empty(0, dtype=np.int64),
            np.zeros((0, bs, h, d), np.float32),
            np.zeros((0, bs, h, d), np.float32),
            v_indices=np.empty(0, dtype=np.int64),
        )
        for _ in range(3)
    ]
    diff = BlockSparseDiff(4, bs, h, d, 96, layers)

    back = deserialize_diff(serialize_diff(diff))
    assert back.layers[0].v_indices.tolist() == [0, 2]
    assert np.array_equal(back.layers[0].k_blocks, k_payload)
    assert np.array_equal(back.layers[0].v_blocks, v_payload)

    restored = diff_decode_dense(master, back)
    assert np.array_equal(restored.k[0, 32:64], k_payload[0])
    assert np.array_equal(restored.v[0, 0:32], v_payload[0])
    assert np.array_equal(restored.v[0, 64:96], v_payload[1])
    assert np.array_equal(restored.k[0, 0:32], master.k[0, 0:32])  # untouched


# ---------------------------------------------------------------------------
# malformed input


def _small_wire():
    rng = np.random.default_rng(41)
    master = _random_kv(rng, 64)
    mirror, hints = _perturb_blocks(rng, master, [0])
    return serialize_diff(encode_diff(master, mirror, hints, BLOCKS))


def test_malformed_diffs_are_rejected():
    wire = _small_wire()
    with pytest.raises(MalformedDiffError, match="magic"):
        deserialize_diff(b"XXXX" + wire[4:])
    with pytest.raises(MalformedDiffError, match="version"):
        deserialize_diff(wire[:4] + b"\xff\x00" + wire[6:])
    with pytest.raises(MalformedDiffError, match="truncated"):
        deserialize_diff(wire[:10])
    with pytest.raises(MalformedDiffError, match="truncated"):
        deserialize_diff(wire[:-6])
    with pytest.raises(MalformedDiffError, match="trailing"):
        deserialize_diff(wire + b"\x00")
    bad_flag = bytearray(wire)
    bad_flag[24 + 4] = 7  # layer 0 index flag
    with pytest.raises(MalformedDiffError, match="flag"):
        deserialize_diff(bytes(bad_flag))
    bad_tail = bytearray(wire)
    bad_tail[-4:] = (99).to_bytes(4, "little")  # valid_len trailer
    with pytest.raises(MalformedDiffError, match="valid_len"):
        deserialize_diff(bytes(bad_tail))
    with pytest.raises(MalformedDiffError, match="truncated"):
        deserialize_diff(b"")


# ---------------------------------------------------------------------------
# families, pinning, fallback


def _fake_family(rng, num_mirrors=2, num_tokens=128):
    master_kv = _random_kv(rng, num_tokens)
    results = {0: SimpleNamespace(kv=master_kv)}
    hints = {}
    for rid in range(1, num_mirrors + 1):
        mirror, h = _perturb_blocks(rng, master_kv, [rid % BLOCKS.num_blocks(num_tokens)])
        results[rid] = SimpleNamespace(kv=mirror)
        hints[rid] = h
    plan = SimpleNamespace(master_id=0, mirror_diff_hints=hints)
    return plan, results


def test_encode_family_pins_master_until_mirrors_release():
    rng = np.random.default_rng(51)
    store = DiffStore(BLOCKS)
    plan, results = _fake_family(rng, num_mirrors=3)
    encoding = store.encode_family(plan, results)

    assert set(encoding.mirrors) == {1, 2, 3}
    assert encoding.master.pin_count == 3
    assert store.is_pinned(encoding.master)
    with pytest.raises(PinnedMasterError):
        store.drop_family(encoding.master.family_id)

    for handle in encoding.mirrors.values():
        handle.release()
    assert encoding.master.pin_count == 0
    assert not store.is_pinned(encoding.master)
    store.drop_family(encoding.master.family_id)
    assert len(store) == 0

    with pytest.raises(ValueError, match="already released"):
        next(iter(encoding.mirrors.values())).release()


def test_mirrors_reconstruct_bit_identically_via_store():
    rng = np.random.default_rng(52)
    store = DiffStore(BLOCKS)
    plan, results = _fake_family(rng, num_mirrors=2)
    encoding = store.encode_family(plan, results)
    for rid, handle in encoding.mirrors.items():
        restored = diff_decode_dense(handle.master.kv, handle.diff)
        assert np.array_equal(restored.k, results[rid].kv.k)
        assert np.array_equal(restored.v, results[rid].kv.v)


def test_family_stats_and_cost():
    rng = np.random.default_rng(53)
    store = DiffStore(BLOCKS)
    plan, results = _fake_family(rng, num_mirrors=2, num_tokens=640)
    stats = store.encode_family(plan, results).stats
    assert stats.dense_nbytes == 327_680
    assert stats.family_cost == 1.0 + sum(
        b / stats.dense_nbytes for b in stats.diff_serialized_nbytes
    )
    assert all(r > 1.0 for r in stats.ratios)

    assert family_cost_from_ratio(10, 11.2) == pytest.approx(1.0 + 9 / 11.2)
    assert family_cost_from_ratio(10, 17.5) == pytest.approx(1.0 + 9 / 17.5)
    assert family_cost_from_ratio(1, 5.0) == 1.0
    with pytest.raises(ValueError):
        family_cost_from_ratio(0, 5.0)
    with pytest.raises(ValueError):
        family_cost_from_ratio(3, 0.0)


def test_register_dense_snapshots_the_planes():
    rng = np.random.default_rng(54)
    store = DiffStore(BLOCKS)
    kv = _random_kv(rng, 64)
    master = store.register_dense(kv, tokens=range(64))
    kv.k[:] = 0.0
    assert not np.array_equal(master.kv.k, kv.k)
    assert master.tokens == tuple(range(64))
    assert not store.is_pinned(master)
    assert not store.is_pinned(object())


def test_find_master_fallback_by_block_token_overlap():
    rng = np.random.default_rng(55)
    store = DiffStore(BLOCKS)
    base = [int(t) for t in rng.integers(0, 1000, 128)]  # 4 blocks

    kv = _random_kv(rng, 128)
    a = store.register_dense(kv, tokens=base)
    store.register_dense(_random_kv(rng, 128))  # no tokens: never a candidate

    # 3 of 4 blocks intact -> similarity 0.75
    request = list(base)
    request[40] += 1
    assert store.find_master_fallback(request) is a
    # 1 of 4 blocks intact -> similarity 0.25 < 0.5
    request = list(base)
    for pos in (0, 40, 100):
        request[pos] += 1
    assert store.find_master_fallback(request, threshold=0.5) is None
    assert store.find_master_fallback(request, threshold=0.25) is a

    # exact duplicate tokens: tie resolves to the lowest family id
    dup = store.register_dense(_random_kv(rng, 128), tokens=base)
    assert dup.family_id > a.family_id
    assert store.find_master_fallback(base) is a

    # request longer than the candidate: unmatched tail blocks count against it
    longer = base + [int(t) for t in rng.integers(0, 1000, 128)]
    assert store.find_master_fallback(longer, threshold=0.5) is a  # 4/8 == 0.5
    assert store.find_master_fallback(longer, threshold=0.6) is None

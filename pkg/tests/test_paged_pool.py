import numpy as np
import pytest

from roundkv.paged_pool import (
    OutOfSlotsError,
    PagedPool,
    SlotMap,
    UseAfterFreeError,
    slot_maps_disjoint,
)


def make_pool(capacity=128, layers=3, debug=True):
    return PagedPool(capacity, num_layers=layers, num_heads=2, head_dim=8,
                     block_size=32, debug=debug)


def rand_rows(rng, n):
    return (rng.standard_normal((n, 2, 8)) * 0.1).astype(np.float32)


def test_write_read_roundtrip_bitwise():
    pool = make_pool()
    rng = np.random.default_rng(0)
    m = pool.allocate(40, request_id=1)
    stored = []
    for layer in range(pool.num_layers):
        k, v = rand_rows(rng, 40), rand_rows(rng, 40)
        pool.write_rows(m, layer, k, v)
        stored.append((k, v))
    for layer in range(pool.num_layers):
        k, v = pool.read_rows(m, layer)
        assert np.array_equal(k, stored[layer][0])
        assert np.array_equal(v, stored[layer][1])


def test_allocation_prefers_block_aligned_runs():
    pool = make_pool(capacity=128)
    m = pool.allocate(64)
    assert np.array_equal(m.slots, np.arange(64))
    m2 = pool.allocate(10)
    assert np.array_equal(m2.slots, np.arange(64, 74))


def test_out_of_slots():
    pool = make_pool(capacity=64)
    pool.allocate(60)
    with pytest.raises(OutOfSlotsError) as err:
        pool.allocate(5)
    assert err.value.requested == 5 and err.value.available == 4


def test_free_then_reuse():
    pool = make_pool(capacity=64)
    a = pool.allocate(30)
    b = pool.allocate(30)
    pool.free(a)
    c = pool.allocate(34)
    assert slot_maps_disjoint([b, c])
    with pytest.raises(ValueError):
        pool.free(a)   # double free


def test_read_after_free_raises_in_debug():
    pool = make_pool()
    rng = np.random.default_rng(1)
    m = pool.allocate(8)
    for layer in range(pool.num_layers):
        pool.write_rows(m, layer, rand_rows(rng, 8), rand_rows(rng, 8))
    pool.free(m)
    with pytest.raises(UseAfterFreeError):
        pool.read_rows(m, 0)
    # reallocated but not yet rewritten: still not readable
    m2 = pool.allocate(8)
    with pytest.raises(UseAfterFreeError):
        pool.read_rows(m2, 0)
    pool.write_rows(m2, 0, rand_rows(rng, 8), rand_rows(rng, 8))
    k, _ = pool.read_rows(m2, 0)
    assert np.isfinite(k).all()


def test_never_written_rows_not_readable_in_debug():
    pool = make_pool()
    m = pool.allocate(4)
    with pytest.raises(UseAfterFreeError):
        pool.read_rows(m, 1)


def test_slot_map_disjointness():
    a = SlotMap(0, np.array([0, 1, 2]))
    b = SlotMap(1, np.array([3, 4]))
    c = SlotMap(2, np.array([2, 9]))
    assert slot_maps_disjoint([a, b])
    assert not slot_maps_disjoint([a, b, c])
    with pytest.raises(ValueError):
        SlotMap(3, np.array([1, 1]))


def test_conservation_under_random_alloc_free_stress():
    pool = make_pool(capacity=256)
    rng = np.random.default_rng(7)
    live = []
    claimed: set[int] = set()
    for step in range(1000):
        if live and (rng.random() < 0.45 or pool.free_count < 20):
            i = int(rng.integers(len(live)))
            m = live.pop(i)
            claimed.difference_update(m.slots.tolist())
            pool.free(m)
        else:
            n = int(rng.integers(1, 20))
            try:
                m = pool.allocate(n, request_id=step)
            except OutOfSlotsError:
                continue
            slots = set(m.slots.tolist())
            assert not slots & claimed, "pool handed out a slot twice"
            claimed |= slots
            live.append(m)
        pool.check_conservation()
        assert pool.allocated_count == len(claimed)
    assert pool.peak_allocated <= pool.capacity


def test_peak_tracking():
    pool = make_pool(capacity=64)
    a = pool.allocate(40)
    pool.free(a)
    assert pool.peak_allocated == 40
    pool.reset_peak()
    assert pool.peak_allocated == 0
    pool.allocate(10)
    assert pool.peak_allocated == 10

import numpy as np
import pytest

from roundkv.core import SegmentKind, token_digest
from roundkv.segment_index import (
    EmptySegmentError,
    PinnedEntryError,
    SegmentCacheEntry,
    SegmentIndex,
    split_segments,
)


def entry(tokens, nbytes=100, src_start=0, ctx=b"c" * 16, ref=None):
    return SegmentCacheEntry(
        digest=token_digest(tokens),
        source_positions=np.arange(src_start, src_start + len(tokens)),
        kv_ref=ref,
        context_digest=ctx,
        nbytes=nbytes,
    )


def test_split_basic_and_kinds():
    segs = split_segments([5, 0, 6, 7], separator=0)
    assert [s.tokens for s in segs] == [(5,), (6, 7)]
    assert segs[0].kind is SegmentKind.PRIVATE_HISTORY
    assert segs[1].kind is SegmentKind.SHARED_OUTPUT


def test_split_error_cases():
    with pytest.raises(EmptySegmentError):
        split_segments([5, 0, 0, 6], separator=0)
    with pytest.raises(EmptySegmentError):
        split_segments([], separator=0)
    with pytest.raises(EmptySegmentError):
        split_segments([0, 0, 0], separator=0)
    with pytest.raises(EmptySegmentError):
        split_segments([0, 5], separator=0)
    with pytest.raises(EmptySegmentError):
        split_segments([5, 0], separator=0)


def test_lookup_hits_regardless_of_source_offset():
    idx = SegmentIndex(budget_bytes=10_000)
    toks = [4, 5, 6]
    idx.insert(entry(toks, src_start=10))
    hit = idx.lookup(token_digest(toks))
    assert hit is not None
    assert hit.source_positions[0] == 10
    # a lookup driven by content found at a totally different offset still hits
    assert idx.lookup(token_digest([4, 5, 6])) is hit


def test_one_token_difference_is_a_distinct_entry():
    idx = SegmentIndex(budget_bytes=10_000)
    idx.insert(entry([1, 2, 3]))
    assert idx.lookup(token_digest([1, 2, 4])) is None
    assert idx.lookup(token_digest([1, 2, 3])) is not None


def test_lookup_returns_most_recent_for_digest():
    idx = SegmentIndex(budget_bytes=10_000)
    first = entry([9, 9], ctx=b"a" * 16)
    second = entry([9, 9], ctx=b"b" * 16)
    idx.insert(first)
    idx.insert(second)
    assert idx.lookup(token_digest([9, 9])) is second


def test_lru_eviction_under_budget_pressure():
    evicted = []
    idx = SegmentIndex(budget_bytes=250, on_evict=evicted.append)
    e1, e2, e3 = entry([1]), entry([2]), entry([3])
    idx.insert(e1)
    idx.insert(e2)
    idx.lookup(e1.digest)        # e2 is now least recently used
    idx.insert(e3)               # 300 bytes > 250: one eviction
    assert evicted == [e2]
    assert idx.lookup(e2.digest) is None
    assert idx.lookup(e1.digest) is e1
    assert idx.total_bytes == 200


def test_budget_zero_empties_unpinned_index():
    idx = SegmentIndex(budget_bytes=10_000)
    for t in range(5):
        idx.insert(entry([t]))
    removed = idx.evict_to_budget(0)
    assert removed == 5
    assert len(idx) == 0 and idx.total_bytes == 0


def test_pinned_entries_survive_eviction():
    class Ref:
        def __init__(self, pinned):
            self.pinned = pinned

    idx = SegmentIndex(budget_bytes=10_000, is_pinned=lambda r: r.pinned)
    master = entry([1], ref=Ref(True))      # master with live mirrors
    loose1 = entry([2], ref=Ref(False))
    loose2 = entry([3], ref=Ref(False))
    idx.insert(master)
    idx.insert(loose1)
    idx.insert(loose2)
    idx.evict_to_budget(0)
    assert idx.lookup(master.digest) is master
    assert idx.lookup(loose1.digest) is None and idx.lookup(loose2.digest) is None
    assert idx.total_bytes == master.nbytes
    with pytest.raises(PinnedEntryError):
        idx.remove(master)
    master.kv_ref.pinned = False            # mirrors released
    idx.evict_to_budget(0)
    assert len(idx) == 0


def test_entry_validation():
    with pytest.raises(EmptySegmentError):
        SegmentCacheEntry(b"d" * 16, np.array([], dtype=np.int64), None, b"c" * 16, 10)
    with pytest.raises(ValueError):
        SegmentCacheEntry(b"d" * 16, np.array([3, 2]), None, b"c" * 16, 10)
    with pytest.raises(ValueError):
        SegmentCacheEntry(b"d" * 16, np.array([1, 2]), None, b"c" * 16, 0)

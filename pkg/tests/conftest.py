import numpy as np
import pytest

from roundkv.core import LayeredKv, ModelConfig, Segment, SegmentKind, token_digest
from roundkv.segment_index import SegmentCacheEntry
from roundkv.toymodel import build_weights, full_prefill

CFG = ModelConfig(num_layers=4, num_heads=2, head_dim=8, vocab_size=1024, weight_seed=42)


@pytest.fixture(scope="session")
def cfg():
    return CFG


@pytest.fixture(scope="session")
def weights():
    return build_weights(CFG)


def rand_tokens(rng, n, vocab=CFG.vocab_size):
    """Random workload tokens, never the reserved separator id."""
    return [int(t) for t in rng.integers(0, vocab - 1, n)]


def make_segment(rng, n, kind=SegmentKind.SHARED_OUTPUT):
    return Segment(tuple(rand_tokens(rng, n)), kind)


class KvRef:
    """Minimal stand-in for a diff-store handle: anything with a .kv."""

    def __init__(self, kv: LayeredKv):
        self.kv = kv


def slice_rows(kv: LayeredKv, lo: int, hi: int) -> LayeredKv:
    return LayeredKv(kv.k[:, lo:hi].copy(), kv.v[:, lo:hi].copy(), kv.positions[lo:hi].copy())


def seed_entry(index, segment, kv_rows, context_tokens):
    """Insert cached rows for a segment produced under the given context."""
    entry = SegmentCacheEntry(
        digest=segment.digest,
        source_positions=kv_rows.positions,
        kv_ref=KvRef(kv_rows),
        context_digest=token_digest(context_tokens),
        nbytes=kv_rows.dense_nbytes,
    )
    index.insert(entry)
    return entry


def random_kv(rng, num_tokens, num_layers=4, num_heads=2, head_dim=8, start=0):
    shape = (num_layers, num_tokens, num_heads, head_dim)
    return LayeredKv(
        rng.standard_normal(shape).astype(np.float32),
        rng.standard_normal(shape).astype(np.float32),
        np.arange(start, start + num_tokens, dtype=np.int64),
    )


def perturb_blocks(rng, master, blocks, block_ids):
    """Mirror = master with every row of the given blocks rewritten, in all
    layers. Returns (mirror, hinted positions)."""
    mirror = master.copy()
    hints = []
    for b in block_ids:
        lo, hi = blocks.block_bounds(b, master.num_tokens)
        mirror.k[:, lo:hi] = rng.standard_normal(mirror.k[:, lo:hi].shape).astype(np.float32)
        mirror.v[:, lo:hi] = rng.standard_normal(mirror.v[:, lo:hi].shape).astype(np.float32)
        hints.extend(range(lo, hi))
    return mirror, np.asarray(sorted(hints), dtype=np.int64)


def seed_produced_segment(index, weights, segment, producer_history):
    """Prefill producer history + separator + segment; cache the segment rows."""
    sep = weights.config.separator_token
    stream = list(producer_history) + [sep] + list(segment.tokens)
    kv = full_prefill(weights, stream)
    lo = len(producer_history) + 1
    rows = slice_rows(kv, lo, len(stream))
    return seed_entry(index, segment, rows, producer_history)

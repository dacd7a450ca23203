"""Position-independent cache recovery for one request.

A prompt is recovered in five steps:

1. the private prefix is computed fresh (it is self-contained under causal
   attention, so its rows are exact);
2. cached K rows of every hit segment are re-encoded from their source
   positions to the prompt's positions in one rotation call per layer
   (V rows are position-free and copied);
3. a probe forward up to the check layer computes fresh K at the reused
   positions (structural positions, separators and cache misses, are part of
   the probe fix set so the probe has defined context between segments);
4. per-position difference magnitudes between fresh and rotated K at the
   check layer rank the reused positions; the top ceil(r * shared) with
   nonzero difference become the important set, and the magnitude sum is the
   request's deviation score;
5. a final selective pass recomputes important and structural positions
   together across all layers.

Recovery never writes to the segment index; it is a pure reader.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import LayeredKv, ModelConfig, PromptLayout, SegmentKind, flatten_prompt
from .ledger import CostLedger
from .segment_index import SegmentCacheEntry, SegmentIndex
from .toymodel import ModelWeights, _selective_forward, full_prefill, rope_apply


@dataclass(frozen=True)
class PicConfig:
    """Selective-recompute knobs: fraction of reused positions to refresh and
    the layer whose key differences rank them."""

    recompute_fraction: float = 0.15
    check_layer: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.recompute_fraction <= 1.0:
            raise ValueError("recompute_fraction must be within [0, 1]")
        if self.check_layer < 0:
            raise ValueError("check_layer must be non-negative")


@dataclass(eq=False)
class HitSegment:
    """A shared segment resolved against the cache."""

    entry: SegmentCacheEntry
    kv: LayeredKv                 # cached rows at their source positions
    target_idx: np.ndarray        # prompt indices this segment occupies

    @property
    def delta(self) -> np.ndarray:
        return self.target_idx - self.entry.source_positions

    def __len__(self) -> int:
        return int(self.target_idx.size)


@dataclass(eq=False)
class PreparedRequest:
    """A request with its hit/miss classification snapshotted.

    Lookups happen once, at preparation time, so serial and grouped execution
    of the same round see identical cache state.
    """

    request_id: int
    layout: PromptLayout
    tokens: np.ndarray
    positions: np.ndarray
    private_idx: np.ndarray
    structural_idx: np.ndarray    # separators, cache misses, task segments
    hits: list[HitSegment]
    slot_map: object = None
    label_entry: np.ndarray = field(default=None, repr=False)
    label_offset: np.ndarray = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.size)

    @property
    def shared_idx(self) -> np.ndarray:
        if not self.hits:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([h.target_idx for h in self.hits]))

    @property
    def hit_digests(self) -> frozenset:
        return frozenset(h.entry.digest for h in self.hits)


@dataclass(eq=False)
class RecoveryResult:
    request_id: int
    kv: LayeredKv
    important_positions: np.ndarray
    deviation_score: float
    num_recomputed: int


def prepare_request(
    layout: PromptLayout,
    model: ModelConfig,
    cache: SegmentIndex,
    request_id: int = 0,
    slot_map: object = None,
) -> PreparedRequest:
    """Flatten the prompt, resolve shared segments against the cache, and
    classify every position as private, reused, or structural-fresh."""
    tokens = np.asarray(flatten_prompt(layout, model.separator_token), dtype=np.int64)
    total = tokens.size
    positions = np.arange(total, dtype=np.int64)
    starts = layout.segment_starts()

    private_idx = np.empty(0, dtype=np.int64)
    structural: list[int] = []
    hits: list[HitSegment] = []
    label_entry = np.full(total, -1, dtype=np.int64)
    label_offset = np.full(total, -1, dtype=np.int64)

    for seg, start in zip(layout.segments, starts):
        idx = np.arange(start, start + len(seg), dtype=np.int64)
        if seg.kind is SegmentKind.PRIVATE_HISTORY:
            private_idx = idx
            continue
        entry = None
        if seg.kind is SegmentKind.SHARED_OUTPUT:
            entry = cache.lookup(seg.digest)
        if entry is None:
            structural.extend(idx.tolist())
            continue
        kv = entry.kv_ref.kv
        if kv.num_tokens != len(seg) or not np.array_equal(kv.positions, entry.source_positions):
            raise ValueError("cache entry does not cover its segment")
        hits.append(HitSegment(entry, kv, idx))
        label_entry[idx] = entry.entry_id
        label_offset[idx] = np.arange(len(seg))

    # one separator sits immediately before each segment after the first
    structural.extend(s - 1 for s in starts[1:])
    structural_idx = np.asarray(sorted(structural), dtype=np.int64)

    return PreparedRequest(
        request_id=request_id,
        layout=layout,
        tokens=tokens,
        positions=positions,
        private_idx=private_idx,
        structural_idx=structural_idx,
        hits=hits,
        slot_map=slot_map,
        label_entry=label_entry,
        label_offset=label_offset,
    )


def key_diff(fresh_k: np.ndarray, cached_k: np.ndarray) -> np.ndarray:
    """Per-position L2 magnitude of the key difference, shape (T,)."""
    if fresh_k.shape != cached_k.shape:
        raise ValueError("key tensors must have identical shapes")
    d = fresh_k - cached_k
    return np.sqrt(np.einsum("thd,thd->t", d, d))


def recompute_budget(fraction: float, shared_count: int) -> int:
    """ceil(fraction * shared_count), guarding against binary float noise in
    human-scale decimal fractions (0.15 * 20 must give 3, not 4)."""
    return int(math.ceil(round(fraction * shared_count, 6)))


def select_important(magnitudes: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the top-``budget`` magnitudes, largest first, ties broken by
    ascending index; positions with exactly zero difference are never taken.
    Returns sorted indices."""
    n = magnitudes.size
    if n == 0 or budget <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -magnitudes))
    order = order[magnitudes[order] > 0.0]
    return np.sort(order[:budget]).astype(np.int64)


def _skeleton(weights: ModelWeights, prep: PreparedRequest) -> tuple[np.ndarray, np.ndarray]:
    """Context tensors with exact private rows and cached V rows in place.
    K rows of hit segments are filled by the alignment step."""
    cfg = weights.config
    shape = (cfg.num_layers, prep.num_tokens, cfg.num_heads, cfg.head_dim)
    ctx_k = np.zeros(shape, dtype=np.float32)
    ctx_v = np.zeros(shape, dtype=np.float32)
    if prep.private_idx.size:
        priv = full_prefill(weights, prep.tokens[prep.private_idx])
        ctx_k[:, prep.private_idx] = priv.k
        ctx_v[:, prep.private_idx] = priv.v
    for hit in prep.hits:
        ctx_v[:, hit.target_idx] = hit.kv.v
    return ctx_k, ctx_v


def align_cached(
    members: Sequence[PreparedRequest],
    contexts: Sequence[tuple[np.ndarray, np.ndarray]],
    rope_base: float,
    ledger: Optional[CostLedger] = None,
) -> None:
    """Rotate every member's cached K rows to their prompt positions.

    All hit segments of all members are concatenated and rotated in a single
    call per layer; the ledger therefore counts one rotation per layer per
    invocation. Rotation is row-independent, so the batched result is
    bit-identical to per-member rotation.
    """
    jobs = [(i, hit) for i, prep in enumerate(members) for hit in prep.hits]
    if not jobs:
        return
    num_layers = jobs[0][1].kv.num_layers
    deltas = np.concatenate([hit.delta for _, hit in jobs])
    for layer in range(num_layers):
        stacked = np.concatenate([hit.kv.k[layer] for _, hit in jobs])
        rotated = rope_apply(stacked, deltas, rope_base) if deltas.any() else stacked
        if ledger is not None:
            ledger.record_rope_call(layer)
        off = 0
        for i, hit in jobs:
            n = len(hit)
            contexts[i][0][layer][hit.target_idx] = rotated[off : off + n]
            off += n


def probe_and_select(
    weights: ModelWeights,
    members: Sequence[PreparedRequest],
    contexts: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: PicConfig,
    ledger: Optional[CostLedger] = None,
) -> list[tuple[np.ndarray, float]]:
    """Fresh check-layer keys at reused positions, one batched difference
    pass, and per-member important sets. Returns (important, deviation) per
    member; members without hits get an empty set and zero deviation."""
    if cfg.check_layer >= weights.config.num_layers:
        raise ValueError("check_layer out of range for this model")
    live = [i for i, m in enumerate(members) if m.shared_idx.size]
    if not live:
        return [(np.empty(0, dtype=np.int64), 0.0) for _ in members]

    fresh_rows = []
    cached_rows = []
    for i in live:
        prep, (ctx_k, ctx_v) = members[i], contexts[i]
        shared = prep.shared_idx
        fix = np.union1d(shared, prep.structural_idx)
        k, _ = _selective_forward(
            weights, prep.tokens, prep.positions, fix, ctx_k, ctx_v,
            max_layer=cfg.check_layer + 1,
        )
        rows = np.searchsorted(fix, shared)
        fresh_rows.append(k[cfg.check_layer][rows])
        cached_rows.append(ctx_k[cfg.check_layer][shared])

    magnitudes = key_diff(np.concatenate(fresh_rows), np.concatenate(cached_rows))
    if ledger is not None:
        ledger.record_selection_pass()

    out: list[tuple[np.ndarray, float]] = [(np.empty(0, dtype=np.int64), 0.0)] * len(members)
    off = 0
    for i in live:
        shared = members[i].shared_idx
        mags = magnitudes[off : off + shared.size]
        off += shared.size
        budget = recompute_budget(cfg.recompute_fraction, shared.size)
        important = shared[select_important(mags, budget)]
        out[i] = (important, float(mags.sum()))
    return out


def refresh(
    weights: ModelWeights,
    prep: PreparedRequest,
    context: tuple[np.ndarray, np.ndarray],
    important: np.ndarray,
    ledger: Optional[CostLedger] = None,
) -> None:
    """Recompute important and structural positions together at all layers."""
    fix = np.union1d(important, prep.structural_idx).astype(np.int64)
    if fix.size == 0:
        return
    ctx_k, ctx_v = context
    k, v = _selective_forward(weights, prep.tokens, prep.positions, fix, ctx_k, ctx_v)
    ctx_k[:, fix] = k
    ctx_v[:, fix] = v
    if ledger is not None:
        ledger.record_recomputed(int(fix.size))


def recover_prepared(
    weights: ModelWeights,
    prep: PreparedRequest,
    cfg: PicConfig,
    ledger: Optional[CostLedger] = None,
) -> RecoveryResult:
    """Serial recovery of one prepared request."""
    context = _skeleton(weights, prep)
    align_cached([prep], [context], weights.config.rope_base, ledger)
    (important, deviation), = probe_and_select(weights, [prep], [context], cfg, ledger)
    refresh(weights, prep, context, important, ledger)
    num_recomputed = int(np.union1d(important, prep.structural_idx).size)
    kv = LayeredKv(context[0], context[1], prep.positions)
    return RecoveryResult(prep.request_id, kv, important, deviation, num_recomputed)


def recover_request(
    weights: ModelWeights,
    layout: PromptLayout,
    cache: SegmentIndex,
    cfg: PicConfig,
    request_id: int = 0,
    ledger: Optional[CostLedger] = None,
) -> RecoveryResult:
    """Lookup, rotate, probe, select, and refresh one prompt end to end."""
    prep = prepare_request(layout, weights.config, cache, request_id)
    return recover_prepared(weights, prep, cfg, ledger)

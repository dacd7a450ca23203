"""Restoring a mirror cache into the slot pool.

The fused path streams one layer at a time through a pair of ping-pong
staging buffers: load the master's layer planes into one buffer, swap it to
the compute role, overlay the mirror's changed blocks, re-encode K to the
new positions, and write the rows into the pool. The diff must be applied
before the positional re-encoding, because changed blocks are stored as the
mirror computed them, at the source positions. Peak staging is therefore two
layer-sized K/V pairs and no dense mirror ever exists.

The dense baseline does the same work the obvious way: materialize the whole
mirror with the diff applied, then rotate and write layer by layer. It
produces bit-identical pool contents while allocating a full dense cache and
moving two extra dense copies' worth of bytes.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .core import CacheBlockConfig, PositionSpan
from .diffstore import MirrorHandle, diff_decode_dense
from .ledger import CostLedger
from .paged_pool import PagedPool, SlotMap
from .toymodel import rope_recover


def _check_restore_args(mirror: MirrorHandle, span: PositionSpan, slot_map: SlotMap) -> None:
    if mirror.released:
        raise ValueError("cannot restore from a released mirror handle")
    master = mirror.master.kv
    if not np.array_equal(span.old_positions, master.positions):
        raise ValueError("span must start at the mirror's source positions")
    if len(slot_map) != master.num_tokens:
        raise ValueError("slot map must cover one slot per token")


def _apply_layer_diff(diff, layer: int, blocks: CacheBlockConfig, k: np.ndarray, v: np.ndarray) -> None:
    ld = diff.layers[layer]
    v_idx = ld.indices if ld.v_indices is None else ld.v_indices
    for j, b in enumerate(ld.indices):
        lo, hi = blocks.block_bounds(int(b), diff.total_tokens)
        k[lo:hi] = ld.k_blocks[j, : hi - lo]
    for j, b in enumerate(v_idx):
        lo, hi = blocks.block_bounds(int(b), diff.total_tokens)
        v[lo:hi] = ld.v_blocks[j, : hi - lo]


def fused_restore(
    mirror: MirrorHandle,
    span: PositionSpan,
    pool: PagedPool,
    slot_map: SlotMap,
    rope_base: float,
    ledger: Optional[CostLedger] = None,
    trace: Optional[list] = None,
) -> None:
    """Load, patch, re-encode, and write each layer without a dense mirror."""
    _check_restore_args(mirror, span, slot_map)
    master = mirror.master.kv
    diff = mirror.diff
    blocks = CacheBlockConfig(diff.block_size)

    plane_shape = master.k.shape[1:]  # (T, H, D)
    buffers = [
        (np.zeros(plane_shape, np.float32), np.zeros(plane_shape, np.float32))
        for _ in range(2)
    ]
    if ledger is not None:
        ledger.record_temp_buffer(sum(k.nbytes + v.nbytes for k, v in buffers))

    load = 0
    for layer in range(master.num_layers):
        load_k, load_v = buffers[load]
        np.copyto(load_k, master.k[layer])
        np.copyto(load_v, master.v[layer])
        if trace is not None:
            trace.append(("load", layer))

        # the loaded buffer becomes the compute buffer; the other one is free
        # for the next layer's load
        comp_k, comp_v = load_k, load_v
        load ^= 1
        if trace is not None:
            trace.append(("swap", layer))

        _apply_layer_diff(diff, layer, blocks, comp_k, comp_v)
        if trace is not None:
            trace.append(("diff", layer))

        rotated_k = rope_recover(span, comp_k, rope_base)
        if trace is not None:
            trace.append(("rope", layer))

        pool.write_rows(slot_map, layer, rotated_k, comp_v)
        if trace is not None:
            trace.append(("write", layer))
        if ledger is not None:
            ledger.record_moved(
                master.k[layer].nbytes
                + master.v[layer].nbytes
                + diff.layers[layer].payload_nbytes
            )


def dense_restore(
    mirror: MirrorHandle,
    span: PositionSpan,
    pool: PagedPool,
    slot_map: SlotMap,
    rope_base: float,
    ledger: Optional[CostLedger] = None,
    trace: Optional[list] = None,
) -> None:
    """Baseline: materialize the dense mirror, then rotate and write it."""
    _check_restore_args(mirror, span, slot_map)
    master = mirror.master.kv
    diff = mirror.diff

    dense = diff_decode_dense(master, diff)
    if trace is not None:
        trace.append(("materialize", -1))
    if ledger is not None:
        ledger.record_dense_mirror()
        ledger.record_temp_buffer(dense.dense_nbytes)
        # reads master + diff like the fused path, plus a full dense write
        # and read-back of the materialized mirror
        ledger.record_moved(
            master.dense_nbytes + diff.payload_nbytes + 2 * dense.dense_nbytes
        )

    for layer in range(master.num_layers):
        rotated_k = rope_recover(span, dense.k[layer], rope_base)
        if trace is not None:
            trace.append(("rope", layer))
        pool.write_rows(slot_map, layer, rotated_k, dense.v[layer])
        if trace is not None:
            trace.append(("write", layer))

"""Counter ledger for one (path, round) execution.

Counters are the acceptance surface of the simulator: alignment rotations per
layer, selection passes, recomputed tokens, bytes stored and moved, dense
mirror materializations, and pool occupancy. rope_calls count cached-K
alignment rotations only; rotary encoding applied inside a recompute forward
is part of recompute cost, not reuse analysis. All increments are guarded by
a lock so concurrent group execution accumulates atomically.
"""
from __future__ import annotations

import threading
from typing import Optional


class CostLedger:
    def __init__(self, num_layers: int) -> None:
        self.num_layers = num_layers
        self.rope_calls_by_layer = [0] * num_layers
        self.selection_passes = 0
        self.recomputed_tokens = 0
        self.bytes_stored_dense = 0
        self.bytes_stored_diff = 0
        self.bytes_moved = 0
        self.dense_mirror_allocations = 0
        self.pool_peak_occupancy = 0
        self.temp_buffer_peak_bytes = 0
        self._lock = threading.Lock()

    @property
    def rope_calls_per_layer(self) -> int:
        """The uniform per-layer alignment-rotation count.

        Every reuse pass rotates cached K at every layer, so the counts must
        agree across layers; a skew means a pipeline bug.
        """
        first = self.rope_calls_by_layer[0] if self.rope_calls_by_layer else 0
        if any(c != first for c in self.rope_calls_by_layer):
            raise AssertionError(f"skewed rope counts: {self.rope_calls_by_layer}")
        return first

    @property
    def bytes_stored_total(self) -> int:
        return self.bytes_stored_dense + self.bytes_stored_diff

    def record_rope_call(self, layer: int) -> None:
        with self._lock:
            self.rope_calls_by_layer[layer] += 1

    def record_selection_pass(self) -> None:
        with self._lock:
            self.selection_passes += 1

    def record_recomputed(self, num_tokens: int) -> None:
        with self._lock:
            self.recomputed_tokens += num_tokens

    def record_stored(self, dense_bytes: int = 0, diff_bytes: int = 0) -> None:
        with self._lock:
            self.bytes_stored_dense += dense_bytes
            self.bytes_stored_diff += diff_bytes

    def record_moved(self, nbytes: int) -> None:
        with self._lock:
            self.bytes_moved += nbytes

    def record_dense_mirror(self) -> None:
        with self._lock:
            self.dense_mirror_allocations += 1

    def record_temp_buffer(self, nbytes: int) -> None:
        with self._lock:
            self.temp_buffer_peak_bytes = max(self.temp_buffer_peak_bytes, nbytes)

    def as_dict(self) -> dict:
        return {
            "rope_calls_per_layer": self.rope_calls_per_layer,
            "selection_passes": self.selection_passes,
            "recomputed_tokens": self.recomputed_tokens,
            "bytes_stored_dense": self.bytes_stored_dense,
            "bytes_stored_diff": self.bytes_stored_diff,
            "bytes_stored_total": self.bytes_stored_total,
            "bytes_moved": self.bytes_moved,
            "dense_mirror_allocations": self.dense_mirror_allocations,
            "pool_peak_occupancy": self.pool_peak_occupancy,
            "temp_buffer_peak_bytes": self.temp_buffer_peak_bytes,
        }

"""Token-slot paged KV pool.

One slot index addresses one token's K and V rows in every layer. The free
list is managed in block-aligned runs where possible so restores write whole
blocks. In debug mode freed slots are poisoned with NaN and reads of slots
that were never rewritten raise, which is how the use-after-free contract is
enforced.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class OutOfSlotsError(RuntimeError):
    def __init__(self, requested: int, available: int) -> None:
        super().__init__(f"requested {requested} slots, {available} free")
        self.requested = requested
        self.available = available


class UseAfterFreeError(RuntimeError):
    """A slot was read after free (or before it was ever written)."""


@dataclass(frozen=True, eq=False)
class SlotMap:
    """Slots assigned to one request, in token order.

    ``serial`` is issued by the pool and identifies the live allocation, so a
    stale map cannot be freed twice even after its slots were handed out again.
    """

    request_id: int
    slots: np.ndarray
    serial: int = -1

    def __post_init__(self) -> None:
        slots = np.asarray(self.slots, dtype=np.int64)
        if len(set(slots.tolist())) != slots.size:
            raise ValueError("slot map must not repeat slots")
        object.__setattr__(self, "slots", slots)

    def __len__(self) -> int:
        return int(self.slots.size)


def slot_maps_disjoint(maps: Sequence[SlotMap]) -> bool:
    total = sum(len(m) for m in maps)
    merged: set[int] = set()
    for m in maps:
        merged.update(m.slots.tolist())
    return len(merged) == total


class PagedPool:
    """Fixed-capacity slot pool with per-layer K and V planes."""

    def __init__(
        self,
        capacity_tokens: int,
        num_layers: int,
        num_heads: int,
        head_dim: int,
        block_size: int = 32,
        debug: bool = True,
    ) -> None:
        if capacity_tokens < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity_tokens)
        self.block_size = int(block_size)
        self.debug = debug
        self.k = np.zeros((num_layers, self.capacity, num_heads, head_dim), dtype=np.float32)
        self.v = np.zeros_like(self.k)
        self._free = set(range(self.capacity))
        # written[layer, slot]: slot holds live data in that layer's planes
        self._written = np.zeros((num_layers, self.capacity), dtype=bool)
        self._peak = 0
        self._next_serial = 0
        self._live: set[int] = set()
        self._lock = threading.Lock()

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def allocated_count(self) -> int:
        return self.capacity - len(self._free)

    @property
    def peak_allocated(self) -> int:
        return self._peak

    def reset_peak(self) -> None:
        with self._lock:
            self._peak = self.allocated_count

    def allocate(self, num_tokens: int, request_id: int = 0) -> SlotMap:
        """Take ``num_tokens`` distinct slots, preferring whole free blocks."""
        if num_tokens < 1:
            raise ValueError("allocation must cover at least one token")
        with self._lock:
            if num_tokens > len(self._free):
                raise OutOfSlotsError(num_tokens, len(self._free))
            chosen: list[int] = []
            need = num_tokens
            num_blocks = -(-self.capacity // self.block_size)
            for b in range(num_blocks):
                if need <= 0:
                    break
                lo = b * self.block_size
                run = [s for s in range(lo, min(lo + self.block_size, self.capacity))]
                if all(s in self._free for s in run):
                    take = run[: min(need, len(run))]
                    chosen.extend(take)
                    need -= len(take)
            if need > 0:
                # fall back to scattered free slots, lowest first
                remaining = sorted(self._free.difference(chosen))
                chosen.extend(remaining[:need])
            self._free.difference_update(chosen)
            self._written[:, chosen] = False
            self._peak = max(self._peak, self.allocated_count)
            serial = self._next_serial
            self._next_serial += 1
            self._live.add(serial)
            return SlotMap(request_id, np.asarray(chosen, dtype=np.int64), serial)

    def free(self, slot_map: SlotMap) -> None:
        """Return slots to the free list; debug mode poisons the contents."""
        with self._lock:
            slots = slot_map.slots
            if slot_map.serial not in self._live:
                raise ValueError("not a live allocation (double or foreign free)")
            self._live.discard(slot_map.serial)
            if self.debug:
                self.k[:, slots] = np.nan
                self.v[:, slots] = np.nan
            self._written[:, slots] = False
            self._free.update(slots.tolist())

    def write_rows(self, slot_map: SlotMap, layer: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        slots = slot_map.slots
        if k_rows.shape[0] != slots.size or v_rows.shape[0] != slots.size:
            raise ValueError("row count must match the slot map")
        self.k[layer, slots] = k_rows
        self.v[layer, slots] = v_rows
        self._written[layer, slots] = True

    def read_rows(self, slot_map: SlotMap, layer: int) -> tuple[np.ndarray, np.ndarray]:
        slots = slot_map.slots
        if self.debug and not self._written[layer, slots].all():
            raise UseAfterFreeError(
                f"layer {layer}: some slots were freed or never written"
            )
        return self.k[layer, slots].copy(), self.v[layer, slots].copy()

    def check_conservation(self) -> None:
        """free + allocated must always equal capacity; no slot in both sets."""
        assert 0 <= len(self._free) <= self.capacity
        assert self.allocated_count + self.free_count == self.capacity

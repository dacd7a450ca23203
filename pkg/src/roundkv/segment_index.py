"""Content-addressed segment cache: digest-keyed lookup with LRU eviction.

Entries are keyed by segment content digest, never by position, so a segment
cached at one prompt offset is found again from any other offset. Multiple
entries may exist per digest (same content computed in different contexts);
lookup returns the most recent one. Entries whose backing store object is
pinned (a diff-family master with live mirrors) are skipped by eviction.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Segment, SegmentKind


class EmptySegmentError(ValueError):
    """Raised when a stream would produce a zero-length segment."""


def split_segments(stream: Sequence[int], separator: int) -> list[Segment]:
    """Split a flattened stream back into its separator-free segments.

    Inverse of flatten_prompt for round prompts. A raw stream carries no kind
    tags, so kinds are assigned positionally (first run private history, the
    rest shared outputs). Digests are computed per segment.
    """
    toks = [int(t) for t in stream]
    if not toks:
        raise EmptySegmentError("empty stream")
    runs: list[list[int]] = [[]]
    for t in toks:
        if t == separator:
            runs.append([])
        else:
            runs[-1].append(t)
    if any(len(r) == 0 for r in runs):
        raise EmptySegmentError(
            "separator placement implies an empty segment "
            "(leading, trailing, or adjacent separators)"
        )
    out = []
    for i, run in enumerate(runs):
        kind = SegmentKind.PRIVATE_HISTORY if i == 0 else SegmentKind.SHARED_OUTPUT
        out.append(Segment(tuple(run), kind))
    return out


_entry_ids = itertools.count()


@dataclass(eq=False)
class SegmentCacheEntry:
    """One cached segment: digest, where its KV was computed, and a store ref.

    ``kv_ref`` is a handle into the diff store (master or mirror); the entry
    itself never holds a dense tensor. ``context_digest`` identifies the
    tokens that preceded the segment when its KV was produced.
    """

    digest: bytes
    source_positions: np.ndarray
    kv_ref: object
    context_digest: bytes
    nbytes: int
    entry_id: int = field(default_factory=lambda: next(_entry_ids))

    def __post_init__(self) -> None:
        self.source_positions = np.asarray(self.source_positions, dtype=np.int64)
        if self.source_positions.size == 0:
            raise EmptySegmentError("entry must cover at least one token")
        if self.source_positions.size > 1 and not np.all(np.diff(self.source_positions) > 0):
            raise ValueError("source positions must be strictly increasing")
        if self.nbytes <= 0:
            raise ValueError("entry byte size must be positive")


class PinnedEntryError(RuntimeError):
    """Raised when removal of a pinned entry is attempted explicitly."""


class SegmentIndex:
    """Digest-keyed cache of SegmentCacheEntry with byte-budget LRU eviction.

    ``is_pinned`` is consulted with an entry's kv_ref during eviction; pinned
    entries are retained even over budget. ``on_evict`` lets the owner release
    the backing store object. All operations take the internal lock, so
    concurrent lookups against in-flight inserts are safe.
    """

    def __init__(
        self,
        budget_bytes: int,
        is_pinned: Optional[Callable[[object], bool]] = None,
        on_evict: Optional[Callable[[SegmentCacheEntry], None]] = None,
    ) -> None:
        if budget_bytes < 0:
            raise ValueError("budget must be non-negative")
        self.budget_bytes = int(budget_bytes)
        self._is_pinned = is_pinned or (lambda ref: False)
        self._on_evict = on_evict
        self._by_digest: dict[bytes, list[SegmentCacheEntry]] = {}
        self._recency: dict[int, SegmentCacheEntry] = {}   # insertion-ordered, oldest first
        self._total = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._recency)

    def __contains__(self, digest: bytes) -> bool:
        with self._lock:
            return bool(self._by_digest.get(digest))

    @property
    def total_bytes(self) -> int:
        return self._total

    def entries(self) -> tuple[SegmentCacheEntry, ...]:
        """Snapshot of live entries, least recently used first."""
        with self._lock:
            return tuple(self._recency.values())

    def lookup(self, digest: bytes) -> Optional[SegmentCacheEntry]:
        """Most recent entry for the digest, or None. Refreshes recency."""
        with self._lock:
            stack = self._by_digest.get(digest)
            if not stack:
                return None
            entry = stack[-1]
            self._recency.pop(entry.entry_id, None)
            self._recency[entry.entry_id] = entry
            return entry

    def insert(self, entry: SegmentCacheEntry) -> None:
        """Add an entry, then evict least-recently-used entries to budget."""
        with self._lock:
            self._by_digest.setdefault(entry.digest, []).append(entry)
            self._recency[entry.entry_id] = entry
            self._total += entry.nbytes
            self._evict_locked(self.budget_bytes)

    def remove(self, entry: SegmentCacheEntry) -> None:
        with self._lock:
            if self._is_pinned(entry.kv_ref):
                raise PinnedEntryError("entry is pinned by live mirrors")
            self._remove_locked(entry)

    def evict_to_budget(self, budget_bytes: Optional[int] = None) -> int:
        """Evict LRU-first down to the budget; returns entries removed.

        Pinned entries are skipped, so the total may stay above budget while
        pins are live.
        """
        with self._lock:
            return self._evict_locked(self.budget_bytes if budget_bytes is None else budget_bytes)

    def _evict_locked(self, budget: int) -> int:
        removed = 0
        if self._total <= budget:
            return removed
        for entry in list(self._recency.values()):   # oldest first
            if self._total <= budget:
                break
            if self._is_pinned(entry.kv_ref):
                continue
            self._remove_locked(entry)
            removed += 1
        return removed

    def _remove_locked(self, entry: SegmentCacheEntry) -> None:
        stack = self._by_digest.get(entry.digest, [])
        if entry in stack:
            stack.remove(entry)
            if not stack:
                del self._by_digest[entry.digest]
        self._recency.pop(entry.entry_id, None)
        self._total -= entry.nbytes
        if self._on_evict is not None:
            self._on_evict(entry)

"""Shared domain types for the round-based KV reuse engine.

Value types here are immutable after construction. KV tensors are float32
throughout; token digests are 128-bit, content-only, and stable across runs
and platforms.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class SegmentKind(Enum):
    PRIVATE_HISTORY = "private_history"
    SHARED_OUTPUT = "shared_output"
    ROUND_TASK = "round_task"


def token_digest(tokens: Sequence[int]) -> bytes:
    """128-bit content digest of a token sequence.

    Hashes the raw little-endian uint32 byte stream of the ids, so the digest
    depends on content only, never on the position a segment occupied.
    """
    raw = np.asarray(tokens, dtype="<u4").tobytes()
    return hashlib.blake2b(raw, digest_size=16).digest()


def kv_dense_nbytes(num_tokens: int, num_layers: int, num_heads: int, head_dim: int) -> int:
    """Bytes of a dense float32 K+V cache for ``num_tokens`` tokens."""
    return num_tokens * num_layers * num_heads * head_dim * 2 * 4


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seeds of the deterministic toy transformer."""

    num_layers: int = 4
    num_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 1024
    rope_base: float = 10000.0
    weight_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("num_layers and num_heads must be positive")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError("head_dim must be a positive even integer")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for the separator id")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def separator_token(self) -> int:
        # the highest id is reserved; workload tokens are drawn below it
        return self.vocab_size - 1


@dataclass(frozen=True)
class Segment:
    """A separator-free run of tokens with a content digest."""

    tokens: tuple[int, ...]
    kind: SegmentKind
    digest: bytes = field(init=False, repr=False)

    def __post_init__(self) -> None:
        toks = tuple(int(t) for t in self.tokens)
        if len(toks) == 0:
            raise ValueError("segment must contain at least one token")
        if any(t < 0 for t in toks):
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "digest", token_digest(toks))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PromptLayout:
    """Ordered segments of one request's prompt.

    Exactly one segment has kind PRIVATE_HISTORY and it comes first; shared
    output segments may appear in any per-agent order after it.
    """

    agent_id: int
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("prompt needs at least one segment")
        private = [i for i, s in enumerate(segs) if s.kind is SegmentKind.PRIVATE_HISTORY]
        if len(private) != 1 or private[0] != 0:
            raise ValueError("exactly one private-history segment, and it must be first")
        object.__setattr__(self, "segments", segs)

    @property
    def total_len(self) -> int:
        """Token count excluding separators."""
        return sum(len(s) for s in self.segments)

    @property
    def flat_len(self) -> int:
        """Token count of the flattened stream, separators included."""
        return self.total_len + len(self.segments) - 1

    def segment_starts(self) -> list[int]:
        """Start offset of each segment in the flattened stream."""
        starts = []
        pos = 0
        for seg in self.segments:
            starts.append(pos)
            pos += len(seg) + 1  # one separator after every segment but the last
        return starts


def flatten_prompt(layout: PromptLayout, separator: int) -> list[int]:
    """Join segments with single separators; no leading or trailing separator."""
    for seg in layout.segments:
        if separator in seg.tokens:
            raise ValueError("separator id must not occur inside a segment")
    out: list[int] = []
    for i, seg in enumerate(layout.segments):
        if i:
            out.append(int(separator))
        out.extend(seg.tokens)
    return out


@dataclass(frozen=True)
class Round:
    """One multi-agent round: the shared output set and each agent's prompt."""

    round_id: int
    shared_outputs: tuple[Segment, ...]
    prompts: tuple[PromptLayout, ...]

    def __post_init__(self) -> None:
        want = sorted(s.digest for s in self.shared_outputs)
        for prompt in self.prompts:
            got = sorted(
                s.digest for s in prompt.segments if s.kind is SegmentKind.SHARED_OUTPUT
            )
            if got != want:
                raise ValueError(
                    f"prompt of agent {prompt.agent_id} must contain every shared"
                    " output exactly once"
                )


@dataclass(eq=False)
class LayeredKv:
    """Per-layer K and V tensors plus the absolute positions they encode.

    ``k`` and ``v`` have shape (num_layers, num_tokens, num_heads, head_dim),
    float32. K rows carry rotary encoding at ``positions``; V rows are
    position-free.
    """

    k: np.ndarray
    v: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        if self.k.shape != self.v.shape or self.k.ndim != 4:
            raise ValueError("k and v must share a (L, T, H, D) shape")
        if self.k.dtype != np.float32 or self.v.dtype != np.float32:
            raise ValueError("kv tensors must be float32")
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.positions.shape != (self.k.shape[1],):
            raise ValueError("positions must have one entry per token")
        if self.positions.size > 1 and not np.all(np.diff(self.positions) > 0):
            raise ValueError("positions must be strictly increasing")

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.k.shape[1]

    @property
    def dense_nbytes(self) -> int:
        return int(self.k.nbytes + self.v.nbytes)

    def copy(self) -> "LayeredKv":
        return LayeredKv(self.k.copy(), self.v.copy(), self.positions.copy())


@dataclass(frozen=True, eq=False)
class PositionSpan:
    """A mapping from the positions KV rows were computed at to new ones."""

    old_positions: np.ndarray
    new_positions: np.ndarray

    def __post_init__(self) -> None:
        old = np.asarray(self.old_positions, dtype=np.int64)
        new = np.asarray(self.new_positions, dtype=np.int64)
        if old.shape != new.shape or old.ndim != 1:
            raise ValueError("old and new positions must be 1-d and equal length")
        for arr in (old, new):
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise ValueError("span positions must be strictly increasing")
        object.__setattr__(self, "old_positions", old)
        object.__setattr__(self, "new_positions", new)

    def __len__(self) -> int:
        return int(self.old_positions.size)

    @property
    def delta(self) -> np.ndarray:
        return self.new_positions - self.old_positions

    @classmethod
    def identity(cls, positions: Iterable[int]) -> "PositionSpan":
        pos = np.asarray(list(positions), dtype=np.int64)
        return cls(pos, pos.copy())

    @classmethod
    def shifted(cls, positions: Iterable[int], offset: int) -> "PositionSpan":
        pos = np.asarray(list(positions), dtype=np.int64)
        return cls(pos, pos + int(offset))


@dataclass(frozen=True)
class CacheBlockConfig:
    """Token-block geometry used by the pool, the diff store, and restores."""

    block_size: int = 32

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    def num_blocks(self, num_tokens: int) -> int:
        return -(-num_tokens // self.block_size)

    def block_bounds(self, block: int, num_tokens: int) -> tuple[int, int]:
        lo = block * self.block_size
        hi = min(lo + self.block_size, num_tokens)
        if lo >= num_tokens:
            raise ValueError("block index out of range")
        return lo, hi

    def valid_len(self, num_tokens: int) -> int:
        """Tokens occupied in the final block."""
        rem = num_tokens % self.block_size
        return rem if rem else min(self.block_size, num_tokens)

"""Master/mirror cache families: block-sparse diffs and their wire format.

One member of a reuse group stores its full cache planes (the master); every
other member stores only the 32-token-aligned blocks that differ, per layer.
Hint positions from the recovery plan restrict which blocks the encoder even
inspects; outside the hinted blocks master and mirror are required to agree
bit for bit, so decoding a diff over the master reproduces the mirror
exactly.

Serialized diffs are little-endian:

    magic "TDDF" | u16 version | u16 num_layers | u32 block_size
    | u32 num_heads | u32 head_dim | u32 total_tokens
    per layer:
      u32 count | u8 1 | count * u32 block indices | K blocks | V blocks
      (flag 0 escape: u32 k_count | u8 0 | k indices | K blocks
                      | u32 v_count | v indices | V blocks)
    u32 valid_len   (rows used in the final, zero-padded block)

Block payloads are raw float32 rows of shape (count, block_size, heads, dim);
the final block of a plane is padded with zeros up to the block size. The
encoder always writes one shared index list for K and V (flag 1); the escape
form with separate lists is understood by the decoder.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import CacheBlockConfig, LayeredKv

MAGIC = b"TDDF"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIII")


class MalformedDiffError(ValueError):
    """Raised when a serialized diff is truncated or inconsistent."""


class HintSoundnessError(RuntimeError):
    """Raised when master and mirror differ outside the hinted positions."""


class PinnedMasterError(RuntimeError):
    """Raised when dropping a family whose master has live mirrors."""


@dataclass(eq=False)
class LayerDiff:
    """Changed blocks of one layer. ``v_indices`` is None when K and V share
    the index list (the only form the encoder emits)."""

    indices: np.ndarray
    k_blocks: np.ndarray
    v_blocks: np.ndarray
    v_indices: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.v_indices is not None:
            self.v_indices = np.asarray(self.v_indices, dtype=np.int64)

    @property
    def payload_nbytes(self) -> int:
        return int(self.k_blocks.nbytes + self.v_blocks.nbytes)


@dataclass(eq=False)
class BlockSparseDiff:
    """Per-layer changed blocks of a mirror relative to its master."""

    num_layers: int
    block_size: int
    num_heads: int
    head_dim: int
    total_tokens: int
    layers: list[LayerDiff]

    def __post_init__(self) -> None:
        if len(self.layers) != self.num_layers:
            raise ValueError("one LayerDiff per layer required")
        blocks = CacheBlockConfig(self.block_size)
        nb = blocks.num_blocks(self.total_tokens)
        for ld in self.layers:
            for idx, payload in ((ld.indices, ld.k_blocks), (ld.v_indices, ld.v_blocks)):
                if idx is None:
                    idx = ld.indices
                if idx.size and (idx.min() < 0 or idx.max() >= nb):
                    raise ValueError("block index out of range")
                if idx.size > 1 and not np.all(np.diff(idx) > 0):
                    raise ValueError("block indices must be strictly increasing")
                want = (idx.size, self.block_size, self.num_heads, self.head_dim)
                if payload.shape != want or payload.dtype != np.float32:
                    raise ValueError("payload must be float32 with one block per index")

    @property
    def payload_nbytes(self) -> int:
        return sum(ld.payload_nbytes for ld in self.layers)

    @property
    def changed_blocks_per_layer(self) -> list[int]:
        return [int(ld.indices.size) for ld in self.layers]


def _pad_rows(rows: np.ndarray, block_size: int) -> np.ndarray:
    """Zero-pad a (n, H, D) row slab to exactly block_size rows."""
    if rows.shape[0] == block_size:
        return rows.copy()
    padded = np.zeros((block_size,) + rows.shape[1:], dtype=np.float32)
    padded[: rows.shape[0]] = rows
    return padded


def encode_diff(
    master: LayeredKv,
    mirror: LayeredKv,
    hint_positions: np.ndarray,
    blocks: CacheBlockConfig,
) -> BlockSparseDiff:
    """Block-sparse difference of mirror against master, restricted to blocks
    touching ``hint_positions``.

    Blocks outside the hints must match bit for bit; any difference there is
    a pipeline bug and raises HintSoundnessError, because silently skipping
    it would break lossless reconstruction.
    """
    if master.k.shape != mirror.k.shape:
        raise ValueError("master and mirror must have identical plane shapes")
    if not np.array_equal(master.positions, mirror.positions):
        raise ValueError("master and mirror must cover the same positions")
    total = master.num_tokens
    nb = blocks.num_blocks(total)
    hints = np.asarray(hint_positions, dtype=np.int64)
    if hints.size and (hints.min() < 0 or hints.max() >= total):
        raise ValueError("hint positions out of range")
    hinted_blocks = set((hints // blocks.block_size).tolist())
    bs, heads, dim = blocks.block_size, master.k.shape[2], master.k.shape[3]

    layers: list[LayerDiff] = []
    for layer in range(master.num_layers):
        mk, ok = mirror.k[layer], master.k[layer]
        mv, ov = mirror.v[layer], master.v[layer]
        changed: list[int] = []
        for b in range(nb):
            lo, hi = blocks.block_bounds(b, total)
            same = np.array_equal(mk[lo:hi], ok[lo:hi]) and np.array_equal(
                mv[lo:hi], ov[lo:hi]
            )
            if same:
                continue
            if b not in hinted_blocks:
                worst = max(
                    float(np.abs(mk[lo:hi] - ok[lo:hi]).max()),
                    float(np.abs(mv[lo:hi] - ov[lo:hi]).max()),
                )
                raise HintSoundnessError(
                    f"layer {layer} block {b} differs outside the hinted"
                    f" positions (max abs {worst:.3e})"
                )
            changed.append(b)
        if changed:
            bounds = [blocks.block_bounds(b, total) for b in changed]
            k_payload = np.stack([_pad_rows(mk[lo:hi], bs) for lo, hi in bounds])
            v_payload = np.stack([_pad_rows(mv[lo:hi], bs) for lo, hi in bounds])
        else:
            k_payload = np.zeros((0, bs, heads, dim), np.float32)
            v_payload = np.zeros((0, bs, heads, dim), np.float32)
        layers.append(LayerDiff(np.asarray(changed, dtype=np.int64), k_payload, v_payload))

    return BlockSparseDiff(
        num_layers=master.num_layers,
        block_size=blocks.block_size,
        num_heads=master.k.shape[2],
        head_dim=master.k.shape[3],
        total_tokens=total,
        layers=layers,
    )


def diff_decode_dense(master: LayeredKv, diff: BlockSparseDiff) -> LayeredKv:
    """Materialize the mirror's full planes: master copy + changed blocks."""
    if (
        master.num_layers != diff.num_layers
        or master.num_tokens != diff.total_tokens
        or master.k.shape[2:] != (diff.num_heads, diff.head_dim)
    ):
        raise ValueError("diff does not describe this master")
    blocks = CacheBlockConfig(diff.block_size)
    out = master.copy()
    for layer, ld in enumerate(diff.layers):
        v_idx = ld.indices if ld.v_indices is None else ld.v_indices
        for j, b in enumerate(ld.indices):
            lo, hi = blocks.block_bounds(int(b), diff.total_tokens)
            out.k[layer, lo:hi] = ld.k_blocks[j, : hi - lo]
        for j, b in enumerate(v_idx):
            lo, hi = blocks.block_bounds(int(b), diff.total_tokens)
            out.v[layer, lo:hi] = ld.v_blocks[j, : hi - lo]
    return out


# ---------------------------------------------------------------------------
# wire format


def serialize_diff(diff: BlockSparseDiff) -> bytes:
    parts = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            diff.num_layers,
            diff.block_size,
            diff.num_heads,
            diff.head_dim,
            diff.total_tokens,
        )
    ]
    for ld in diff.layers:
        if ld.v_indices is None:
            parts.append(struct.pack("<IB", ld.indices.size, 1))
            parts.append(ld.indices.astype("<u4").tobytes())
            parts.append(ld.k_blocks.astype("<f4", copy=False).tobytes())
            parts.append(ld.v_blocks.astype("<f4", copy=False).tobytes())
        else:
            parts.append(struct.pack("<IB", ld.indices.size, 0))
            parts.append(ld.indices.astype("<u4").tobytes())
            parts.append(ld.k_blocks.astype("<f4", copy=False).tobytes())
            parts.append(struct.pack("<I", ld.v_indices.size))
            parts.append(ld.v_indices.astype("<u4").tobytes())
            parts.append(ld.v_blocks.astype("<f4", copy=False).tobytes())
    blocks = CacheBlockConfig(diff.block_size)
    parts.append(struct.pack("<I", blocks.valid_len(diff.total_tokens)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise MalformedDiffError(f"truncated diff: expected {what}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def _read_indices(r: _Reader, count: int, what: str) -> np.ndarray:
    idx = np.frombuffer(r.take(4 * count, what), dtype="<u4").astype(np.int64)
    if idx.size > 1 and not np.all(np.diff(idx) > 0):
        raise MalformedDiffError(f"{what} must be strictly increasing")
    return idx


def _read_blocks(r: _Reader, count: int, bs: int, h: int, d: int, what: str) -> np.ndarray:
    raw = r.take(count * bs * h * d * 4, what)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(count, bs, h, d)


def deserialize_diff(buf: bytes) -> BlockSparseDiff:
    r = _Reader(buf)
    magic, version, num_layers, bs, heads, dim, total = _HEADER.unpack(
        r.take(_HEADER.size, "header")
    )
    if magic != MAGIC:
        raise MalformedDiffError("bad magic")
    if version != VERSION:
        raise MalformedDiffError(f"unsupported version {version}")
    if min(num_layers, bs, heads, dim, total) <= 0:
        raise MalformedDiffError("non-positive geometry field")

    layers = []
    for layer in range(num_layers):
        count = r.u32(f"layer {layer} count")
        flag = r.u8(f"layer {layer} index flag")
        if flag not in (0, 1):
            raise MalformedDiffError(f"layer {layer}: unknown index flag {flag}")
        indices = _read_indices(r, count, f"layer {layer} indices")
        k_blocks = _read_blocks(r, count, bs, heads, dim, f"layer {layer} K payload")
        if flag == 1:
            v_blocks = _read_blocks(r, count, bs, heads, dim, f"layer {layer} V payload")
            layers.append(LayerDiff(indices, k_blocks, v_blocks))
        else:
            v_count = r.u32(f"layer {layer} V count")
            v_indices = _read_indices(r, v_count, f"layer {layer} V indices")
            v_blocks = _read_blocks(r, v_count, bs, heads, dim, f"layer {layer} V payload")
            layers.append(LayerDiff(indices, k_blocks, v_blocks, v_indices=v_indices))

    valid_len = r.u32("valid_len trailer")
    if r.off != len(buf):
        raise MalformedDiffError("trailing bytes after diff")
    diff = BlockSparseDiff(num_layers, bs, heads, dim, total, layers)
    if valid_len != CacheBlockConfig(bs).valid_len(total):
        raise MalformedDiffError("valid_len disagrees with token count")
    return diff


# ---------------------------------------------------------------------------
# families


@dataclass(eq=False)
class MasterEntry:
    """The one dense cache of a family. ``kv`` makes it usable directly as a
    segment index handle."""

    family_id: int
    kv: LayeredKv
    tokens: Optional[tuple[int, ...]] = None
    pin_count: int = 0


@dataclass(eq=False)
class MirrorHandle:
    """A mirror cache: master reference plus a block-sparse diff.

    Mirrors never hold dense planes; materialization happens at restore time.
    While a handle is live its master is pinned.
    """

    family_id: int
    request_id: int
    master: MasterEntry
    diff: BlockSparseDiff
    released: bool = field(default=False, init=False)

    @property
    def positions(self) -> np.ndarray:
        return self.master.kv.positions

    def release(self) -> None:
        if self.released:
            raise ValueError("mirror handle already released")
        self.released = True
        self.master.pin_count -= 1


@dataclass(eq=False)
class CompressionStats:
    """Byte accounting for one encoded family."""

    dense_nbytes: int
    diff_payload_nbytes: list[int]
    diff_serialized_nbytes: list[int]
    changed_blocks: list[int]

    @property
    def ratios(self) -> list[float]:
        return [self.dense_nbytes / b for b in self.diff_serialized_nbytes]

    @property
    def family_cost(self) -> float:
        """Stored bytes in units of one dense cache: 1 master plus the
        serialized diffs."""
        return 1.0 + sum(b / self.dense_nbytes for b in self.diff_serialized_nbytes)


def family_cost_from_ratio(num_members: int, ratio: float) -> float:
    """Family cost when every mirror compresses at the same dense:diff ratio."""
    if num_members < 1:
        raise ValueError("a family has at least one member")
    if ratio <= 0:
        raise ValueError("compression ratio must be positive")
    return 1.0 + (num_members - 1) / ratio


@dataclass(eq=False)
class FamilyEncoding:
    master: MasterEntry
    mirrors: dict[int, MirrorHandle]
    stats: CompressionStats


class DiffStore:
    """Registry of cache families: dense masters and diff-encoded mirrors."""

    def __init__(self, blocks: CacheBlockConfig):
        self.blocks = blocks
        self._families: dict[int, FamilyEncoding] = {}
        self._next_id = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._families)

    def register_dense(
        self, kv: LayeredKv, tokens: Optional[Sequence[int]] = None
    ) -> MasterEntry:
        """Store a standalone dense cache as a single-member family."""
        with self._lock:
            fid = self._next_id
            self._next_id += 1
            master = MasterEntry(
                fid, kv.copy(), None if tokens is None else tuple(int(t) for t in tokens)
            )
            stats = CompressionStats(kv.dense_nbytes, [], [], [])
            self._families[fid] = FamilyEncoding(master, {}, stats)
            return master

    def encode_family(
        self,
        plan,
        results,
        tokens: Optional[Sequence[int]] = None,
    ) -> FamilyEncoding:
        """Encode one recovered group: the elected master stays dense, every
        other member becomes a hint-restricted block diff against it."""
        master_kv = results[plan.master_id].kv
        master = self.register_dense(master_kv, tokens)
        mirrors: dict[int, MirrorHandle] = {}
        payload_bytes: list[int] = []
        serialized_bytes: list[int] = []
        changed: list[int] = []
        for rid, hints in sorted(plan.mirror_diff_hints.items()):
            diff = encode_diff(master_kv, results[rid].kv, hints, self.blocks)
            handle = MirrorHandle(master.family_id, rid, master, diff)
            master.pin_count += 1
            mirrors[rid] = handle
            payload_bytes.append(diff.payload_nbytes)
            serialized_bytes.append(len(serialize_diff(diff)))
            changed.append(sum(diff.changed_blocks_per_layer))
        stats = CompressionStats(
            master_kv.dense_nbytes, payload_bytes, serialized_bytes, changed
        )
        encoding = FamilyEncoding(master, mirrors, stats)
        with self._lock:
            self._families[master.family_id] = encoding
        return encoding

    def family(self, family_id: int) -> FamilyEncoding:
        with self._lock:
            return self._families[family_id]

    def drop_family(self, family_id: int) -> None:
        with self._lock:
            encoding = self._families[family_id]
            if encoding.master.pin_count > 0:
                raise PinnedMasterError(
                    f"family {family_id} has {encoding.master.pin_count} live mirrors"
                )
            del self._families[family_id]

    def is_pinned(self, ref: object) -> bool:
        """Eviction callback for the segment index: masters with live mirrors
        must not be dropped."""
        return isinstance(ref, MasterEntry) and ref.pin_count > 0

    def find_master_fallback(
        self, tokens: Sequence[int], threshold: float = 0.5
    ) -> Optional[MasterEntry]:
        """Best existing master by block-aligned token equality.

        Used when a request carries no explicit family: the fraction of the
        request's blocks whose tokens match the candidate's exactly must
        reach ``threshold``. Ties go to the lowest family id.
        """
        want = [int(t) for t in tokens]
        nb = self.blocks.num_blocks(len(want))
        best: Optional[tuple[float, int]] = None
        with self._lock:
            candidates = [
                enc.master for enc in self._families.values() if enc.master.tokens is not None
            ]
        for master in sorted(candidates, key=lambda m: m.family_id):
            have = list(master.tokens)
            equal = 0
            for b in range(nb):
                lo, hi = self.blocks.block_bounds(b, len(want))
                if hi <= len(have) and have[lo:hi] == want[lo:hi]:
                    equal += 1
            score = equal / nb
            if score >= threshold and (best is None or score > best[0]):
                best = (score, master.family_id)
        if best is None:
            return None
        with self._lock:
            return self._families[best[1]].master

"""Grouped recovery: share rotation and selection work across requests.

Requests in one reuse group run the same arithmetic as serial recovery, but
the cached-K rotation concatenates every member's hit rows into a single call
per layer, and the check-layer difference ranks all members in one pass.
Both operations are row-independent, so grouped results are bit-identical to
serial ones; only the call counts change.

After recovery the group elects a master (lowest total deviation, ties to the
lowest request id) and derives, for each remaining member, the positions
where its cache may differ from the master's: positions computed fresh on
either side, positions backed by different cache entries or offsets, and both
sides' important sets. Outside those hint positions both caches hold rows
copied or rotated from the same cache entry by identical calls, so they are
bit-equal, which is what lets the diff encoder restrict itself to hinted
blocks without loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import LayeredKv
from .ledger import CostLedger
from .paged_pool import slot_maps_disjoint
from .pic import (
    PicConfig,
    PreparedRequest,
    RecoveryResult,
    _skeleton,
    align_cached,
    probe_and_select,
    refresh,
)
from .toymodel import ModelWeights


@dataclass(eq=False)
class ReuseGroup:
    """Two or more prepared requests that can recover together."""

    group_id: int
    members: list[PreparedRequest]

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ValueError("a reuse group needs at least two members")
        ids = [m.request_id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("group member request ids must be distinct")

    @property
    def member_ids(self) -> list[int]:
        return [m.request_id for m in self.members]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(eq=False)
class ReusePlan:
    """Election and mirror-diff hints for one recovered group."""

    group: ReuseGroup
    deviation_scores: dict[int, float]
    master_id: int
    important: dict[int, np.ndarray]
    mirror_diff_hints: dict[int, np.ndarray]  # request id -> hinted positions


def _compatible(candidate: PreparedRequest, bucket: list[PreparedRequest]) -> bool:
    head = bucket[0]
    if candidate.num_tokens != head.num_tokens:
        return False
    if candidate.hit_digests != head.hit_digests:
        return False
    maps = [m.slot_map for m in bucket + [candidate] if m.slot_map is not None]
    if len(maps) > 1 and not slot_maps_disjoint(maps):
        return False
    return True


def form_groups(
    preps: Sequence[PreparedRequest],
    first_group_id: int = 0,
) -> tuple[list[ReuseGroup], list[PreparedRequest]]:
    """Partition requests into reuse groups, greedily in arrival order.

    A request joins the first open bucket whose members have the same prompt
    length, the same set of hit digests, and pool slot maps disjoint from its
    own (requests without a slot map impose no write constraint). Buckets
    that end up with a single member are returned as the serial remainder.
    """
    buckets: list[list[PreparedRequest]] = []
    for prep in preps:
        for bucket in buckets:
            if _compatible(prep, bucket):
                bucket.append(prep)
                break
        else:
            buckets.append([prep])

    groups: list[ReuseGroup] = []
    remainder: list[PreparedRequest] = []
    gid = first_group_id
    for bucket in buckets:
        if len(bucket) >= 2:
            groups.append(ReuseGroup(gid, bucket))
            gid += 1
        else:
            remainder.append(bucket[0])
    return groups, remainder


def select_master(deviation_scores: dict[int, float]) -> int:
    """Request id with the lowest total deviation; ties go to the lowest id."""
    if not deviation_scores:
        raise ValueError("cannot elect a master from an empty group")
    return min(deviation_scores.items(), key=lambda item: (item[1], item[0]))[0]


def mirror_hint_positions(
    member: PreparedRequest,
    master: PreparedRequest,
    member_important: np.ndarray,
    master_important: np.ndarray,
) -> np.ndarray:
    """Positions where the member's cache may differ from the master's.

    A position is hinted when either side computed it fresh (private rows,
    separators, misses, or task segments), when the two sides drew it from
    different cache entries or segment offsets, or when either side's
    selective refresh rewrote it. Everything outside this set was produced
    from the same entry rows by the same batched rotation and is bit-equal.
    """
    if member.num_tokens != master.num_tokens:
        raise ValueError("hints are only defined for equal-length prompts")
    divergent = (
        (member.label_entry == -1)
        | (master.label_entry == -1)
        | (member.label_entry != master.label_entry)
        | (member.label_offset != master.label_offset)
    )
    hinted = np.where(divergent)[0]
    hinted = np.union1d(hinted, member_important)
    hinted = np.union1d(hinted, master_important)
    return hinted.astype(np.int64)


def collective_recover(
    weights: ModelWeights,
    group: ReuseGroup,
    cfg: PicConfig,
    ledger: Optional[CostLedger] = None,
) -> tuple[dict[int, RecoveryResult], ReusePlan]:
    """Recover every group member with shared rotation and selection passes."""
    members = group.members
    contexts = [_skeleton(weights, m) for m in members]
    align_cached(members, contexts, weights.config.rope_base, ledger)
    selections = probe_and_select(weights, members, contexts, cfg, ledger)

    results: dict[int, RecoveryResult] = {}
    scores: dict[int, float] = {}
    important: dict[int, np.ndarray] = {}
    for prep, context, (imp, deviation) in zip(members, contexts, selections):
        refresh(weights, prep, context, imp, ledger)
        kv = LayeredKv(context[0], context[1], prep.positions)
        recomputed = int(np.union1d(imp, prep.structural_idx).size)
        results[prep.request_id] = RecoveryResult(
            prep.request_id, kv, imp, deviation, recomputed
        )
        scores[prep.request_id] = deviation
        important[prep.request_id] = imp

    master_id = select_master(scores)
    master_prep = next(m for m in members if m.request_id == master_id)
    hints = {
        prep.request_id: mirror_hint_positions(
            prep, master_prep, important[prep.request_id], important[master_id]
        )
        for prep in members
        if prep.request_id != master_id
    }
    plan = ReusePlan(group, scores, master_id, important, hints)
    return results, plan

"""Three-path round simulator with per-round cost and fidelity reporting.

Every round is served three independent ways, each with its own pool, cache
index, and diff store:

* **T1** — no reuse: every prompt is recomputed from scratch and stored dense.
* **T2** — serial reuse: each request runs the recovery pipeline on its own;
  every recovered cache is stored dense.
* **T3** — grouped reuse: compatible requests recover together, one member's
  cache stays dense (the master) and the rest become block-sparse diffs; each
  mirror is then restored through the fused path at shifted positions and
  checked bit-for-bit against the dense-materialization baseline.

Before a round is served on a reuse path, the round's output blocks are
seeded into the segment index exactly as their producers would have decoded
them (continuations of the producer's previous prompt), so T2 and T3 see
identical hit sets. Recovery never inserts into the index, which keeps the
two paths comparable round by round.

Reports are plain dicts of Python scalars with no timestamps; serializing
them with sorted keys is byte-stable across runs of the same spec.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .collective import collective_recover, form_groups
from .core import (
    CacheBlockConfig,
    LayeredKv,
    ModelConfig,
    PositionSpan,
    Round,
    flatten_prompt,
    token_digest,
)
from .diffstore import DiffStore, FamilyEncoding
from .ledger import CostLedger
from .paged_pool import OutOfSlotsError, PagedPool, SlotMap
from .pic import PicConfig, PreparedRequest, RecoveryResult, prepare_request, recover_prepared
from .restore import dense_restore, fused_restore
from .segment_index import SegmentCacheEntry, SegmentIndex
from .toymodel import ModelWeights, build_weights, full_prefill
from .workload import WorkloadSpec, decode_context, generate_round

PATHS = ("T1", "T2", "T3")
REPORT_SCHEMA = "roundkv-report-v1"


class RestoreMismatchError(RuntimeError):
    """Fused and dense restores of the same mirror disagreed."""


@dataclass(frozen=True)
class SimulationSpec:
    """Everything a simulation run depends on, resolved to concrete values."""

    model: ModelConfig = ModelConfig()
    workload: WorkloadSpec = WorkloadSpec()
    pic: PicConfig = PicConfig()
    blocks: CacheBlockConfig = CacheBlockConfig()
    pool_capacity_tokens: int = 4096
    index_budget_bytes: int = 64 * 1024 * 1024
    concurrent_groups: bool = False
    restore_shift: int = 16

    def __post_init__(self) -> None:
        if self.pic.check_layer >= self.model.num_layers:
            raise ValueError("pic.check_layer must be below the layer count")
        if self.pool_capacity_tokens < 1:
            raise ValueError("pool capacity must be positive")
        if self.index_budget_bytes < 0:
            raise ValueError("index budget must be non-negative")


def spec_echo(spec: SimulationSpec, paths: Sequence[str]) -> dict:
    """The resolved configuration as plain JSON-ready values."""
    history = spec.workload.history_len
    return {
        "model": {
            "num_layers": spec.model.num_layers,
            "num_heads": spec.model.num_heads,
            "head_dim": spec.model.head_dim,
            "vocab_size": spec.model.vocab_size,
            "rope_base": spec.model.rope_base,
            "weight_seed": spec.model.weight_seed,
        },
        "workload": {
            "num_agents": spec.workload.num_agents,
            "num_rounds": spec.workload.num_rounds,
            "history_len": history if isinstance(history, int) else list(history),
            "shared_block_len": spec.workload.shared_block_len,
            "token_seed": spec.workload.token_seed,
            "permutation_seed": spec.workload.permutation_seed,
        },
        "pic": {
            "recompute_fraction": spec.pic.recompute_fraction,
            "check_layer": spec.pic.check_layer,
        },
        "blocks": {"block_size": spec.blocks.block_size},
        "pool": {"capacity_tokens": spec.pool_capacity_tokens},
        "segment_index": {"budget_bytes": spec.index_budget_bytes},
        "harness": {
            "paths": list(paths),
            "concurrent_groups": spec.concurrent_groups,
            "restore_shift": spec.restore_shift,
        },
    }


class _PathState:
    """Pool, index, and store of one execution path, shared across rounds."""

    def __init__(self, spec: SimulationSpec):
        self.pool = PagedPool(
            spec.pool_capacity_tokens,
            spec.model.num_layers,
            spec.model.num_heads,
            spec.model.head_dim,
            block_size=spec.blocks.block_size,
        )
        self.store = DiffStore(spec.blocks)
        self.index = SegmentIndex(spec.index_budget_bytes, is_pinned=self.store.is_pinned)


def _fidelity(results: Sequence[LayeredKv], oracles: Sequence[LayeredKv]) -> dict:
    """Per-position L2 error of K and V rows against the oracle caches."""
    k_all, v_all = [], []
    for got, want in zip(results, oracles):
        dk = got.k - want.k
        dv = got.v - want.v
        k_all.append(np.sqrt(np.einsum("lthd,lthd->lt", dk, dk)).ravel())
        v_all.append(np.sqrt(np.einsum("lthd,lthd->lt", dv, dv)).ravel())
    k = np.concatenate(k_all)
    v = np.concatenate(v_all)
    return {
        "mean_k_err": float(k.mean()),
        "max_k_err": float(k.max()),
        "mean_v_err": float(v.mean()),
        "max_v_err": float(v.max()),
    }


def _write_cache(pool: PagedPool, slot_map: Optional[SlotMap], kv: LayeredKv) -> None:
    if slot_map is None:
        return
    for layer in range(kv.num_layers):
        pool.write_rows(slot_map, layer, kv.k[layer], kv.v[layer])


def _free_maps(pool: PagedPool, maps: Sequence[Optional[SlotMap]]) -> None:
    for slot_map in maps:
        if slot_map is not None:
            pool.free(slot_map)


def _round_seeds(
    spec: SimulationSpec, weights: ModelWeights, rnd: Round
) -> list[tuple]:
    """Cache rows for the round's outputs, decoded as continuations of each
    producer's previous prompt. Computed once, registered per path."""
    seeds = []
    for agent, seg in enumerate(rnd.shared_outputs):
        ctx = decode_context(spec.workload, spec.model, rnd.round_id, agent)
        stream = list(ctx) + [spec.model.separator_token] + list(seg.tokens)
        kv = full_prefill(weights, stream)
        lo = len(ctx) + 1
        rows = LayeredKv(
            kv.k[:, lo:].copy(), kv.v[:, lo:].copy(), kv.positions[lo:].copy()
        )
        seeds.append((seg, rows, token_digest(ctx)))
    return seeds


def _seed_path(state: _PathState, seeds: Sequence[tuple]) -> None:
    for seg, rows, ctx_digest in seeds:
        master = state.store.register_dense(rows, tokens=seg.tokens)
        state.index.insert(
            SegmentCacheEntry(seg.digest, rows.positions, master, ctx_digest, rows.dense_nbytes)
        )


def _prepare_round(
    spec: SimulationSpec, state: _PathState, rnd: Round
) -> tuple[list[PreparedRequest], bool]:
    """Prepare every prompt, allocating pool slots; allocation failure leaves
    the request without a slot map and flags the round."""
    preps = []
    exhausted = False
    for prompt in rnd.prompts:
        try:
            slot_map = state.pool.allocate(prompt.flat_len, request_id=prompt.agent_id)
        except OutOfSlotsError:
            slot_map = None
            exhausted = True
        preps.append(
            prepare_request(
                prompt, spec.model, state.index,
                request_id=prompt.agent_id, slot_map=slot_map,
            )
        )
    return preps, exhausted


def _new_row(path: str, rnd: Round, ledger: CostLedger, pool: PagedPool) -> dict:
    row = {
        "path": path,
        "round": rnd.round_id,
        "num_requests": len(rnd.prompts),
        "hit_segments": 0,
        "num_groups": 0,
        "num_remainder": 0,
        "restores_verified": 0,
        "pool_exhausted": False,
        "compression": None,
    }
    row["_ledger"] = ledger
    row["_pool"] = pool
    return row


def _finish_row(row: dict, dense_bytes_per_request: Sequence[int]) -> dict:
    ledger: CostLedger = row.pop("_ledger")
    pool: PagedPool = row.pop("_pool")
    ledger.pool_peak_occupancy = pool.peak_allocated
    row.update(ledger.as_dict())
    mean_dense = sum(dense_bytes_per_request) / len(dense_bytes_per_request)
    row["storage_cost_dense_units"] = ledger.bytes_stored_total / mean_dense
    return row


def _run_t1(
    spec: SimulationSpec,
    weights: ModelWeights,
    state: _PathState,
    rnd: Round,
    oracles: Sequence[LayeredKv],
    ledger: CostLedger,
) -> dict:
    row = _new_row("T1", rnd, ledger, state.pool)
    maps = []
    results = []
    for prompt in rnd.prompts:
        tokens = flatten_prompt(prompt, spec.model.separator_token)
        try:
            slot_map = state.pool.allocate(len(tokens), request_id=prompt.agent_id)
        except OutOfSlotsError:
            slot_map = None
            row["pool_exhausted"] = True
        kv = full_prefill(weights, tokens)
        ledger.record_recomputed(len(tokens))
        ledger.record_stored(kv.dense_nbytes, 0)
        _write_cache(state.pool, slot_map, kv)
        maps.append(slot_map)
        results.append(kv)
    row["fidelity"] = _fidelity(results, oracles)
    _finish_row(row, [kv.dense_nbytes for kv in results])
    _free_maps(state.pool, maps)
    return row


def _run_t2(
    spec: SimulationSpec,
    weights: ModelWeights,
    state: _PathState,
    rnd: Round,
    oracles: Sequence[LayeredKv],
    ledger: CostLedger,
) -> dict:
    row = _new_row("T2", rnd, ledger, state.pool)
    preps, row["pool_exhausted"] = _prepare_round(spec, state, rnd)
    row["hit_segments"] = sum(len(p.hits) for p in preps)
    results = []
    for prep in preps:
        result = recover_prepared(weights, prep, spec.pic, ledger)
        ledger.record_stored(result.kv.dense_nbytes, 0)
        _write_cache(state.pool, prep.slot_map, result.kv)
        results.append(result.kv)
    row["fidelity"] = _fidelity(results, oracles)
    _finish_row(row, [kv.dense_nbytes for kv in results])
    _free_maps(state.pool, [p.slot_map for p in preps])
    return row


def _verify_family_restores(
    spec: SimulationSpec,
    state: _PathState,
    encoding: FamilyEncoding,
    ledger: CostLedger,
    row: dict,
) -> None:
    """Restore every mirror at shifted positions through the fused path and
    check it bit-for-bit against the dense baseline. The baseline's costs go
    to a throwaway ledger: it exists to verify, not to serve."""
    num_layers = spec.model.num_layers
    for rid, handle in sorted(encoding.mirrors.items()):
        total = handle.master.kv.num_tokens
        try:
            fused_map = state.pool.allocate(total, request_id=1_000_000 + rid)
        except OutOfSlotsError:
            row["pool_exhausted"] = True
            return
        try:
            dense_map = state.pool.allocate(total, request_id=2_000_000 + rid)
        except OutOfSlotsError:
            state.pool.free(fused_map)
            row["pool_exhausted"] = True
            return
        span = PositionSpan.shifted(handle.positions, spec.restore_shift)
        fused_restore(handle, span, state.pool, fused_map, spec.model.rope_base, ledger=ledger)
        dense_restore(
            handle, span, state.pool, dense_map, spec.model.rope_base,
            ledger=CostLedger(num_layers),
        )
        for layer in range(num_layers):
            fk, fv = state.pool.read_rows(fused_map, layer)
            dk, dv = state.pool.read_rows(dense_map, layer)
            if not (np.array_equal(fk, dk) and np.array_equal(fv, dv)):
                raise RestoreMismatchError(
                    f"round {row['round']} request {rid} layer {layer}:"
                    " fused and dense restores differ"
                )
        state.pool.free(fused_map)
        state.pool.free(dense_map)
        row["restores_verified"] += 1


def _run_t3(
    spec: SimulationSpec,
    weights: ModelWeights,
    state: _PathState,
    rnd: Round,
    oracles: Sequence[LayeredKv],
    ledger: CostLedger,
) -> dict:
    row = _new_row("T3", rnd, ledger, state.pool)
    preps, row["pool_exhausted"] = _prepare_round(spec, state, rnd)
    row["hit_segments"] = sum(len(p.hits) for p in preps)

    # requests that could not get pool slots cannot join a group (their
    # writes are skipped, but grouping is defined over pool-backed requests)
    groupable = [p for p in preps if p.slot_map is not None]
    mapless = [p for p in preps if p.slot_map is None]
    groups, remainder = form_groups(groupable)
    remainder = remainder + mapless
    row["num_groups"] = len(groups)
    row["num_remainder"] = len(remainder)

    if spec.concurrent_groups and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(groups))) as pool_exec:
            outcomes = list(
                pool_exec.map(
                    lambda g: collective_recover(weights, g, spec.pic, ledger), groups
                )
            )
    else:
        outcomes = [collective_recover(weights, g, spec.pic, ledger) for g in groups]

    results_by_id: dict[int, RecoveryResult] = {}
    compression = {
        "families": 0,
        "mirror_serialized_bytes": [],
        "mirror_payload_bytes": [],
        "mirror_ratios": [],
        "changed_blocks": [],
    }
    for group, (results, plan) in zip(groups, outcomes):
        for prep in group.members:
            result = results[prep.request_id]
            _write_cache(state.pool, prep.slot_map, result.kv)
            results_by_id[prep.request_id] = result
        master_prep = next(
            p for p in group.members if p.request_id == plan.master_id
        )
        encoding = state.store.encode_family(
            plan, results, tokens=master_prep.tokens.tolist()
        )
        stats = encoding.stats
        ledger.record_stored(stats.dense_nbytes, sum(stats.diff_serialized_nbytes))
        compression["families"] += 1
        compression["mirror_serialized_bytes"] += stats.diff_serialized_nbytes
        compression["mirror_payload_bytes"] += stats.diff_payload_nbytes
        compression["mirror_ratios"] += [float(r) for r in stats.ratios]
        compression["changed_blocks"] += stats.changed_blocks
        _verify_family_restores(spec, state, encoding, ledger, row)

    for prep in remainder:
        result = recover_prepared(weights, prep, spec.pic, ledger)
        ledger.record_stored(result.kv.dense_nbytes, 0)
        state.store.register_dense(result.kv, tokens=prep.tokens.tolist())
        _write_cache(state.pool, prep.slot_map, result.kv)
        results_by_id[prep.request_id] = result

    row["compression"] = compression
    ordered = [results_by_id[p.agent_id].kv for p in rnd.prompts]
    row["fidelity"] = _fidelity(ordered, oracles)
    _finish_row(row, [kv.dense_nbytes for kv in ordered])
    _free_maps(state.pool, [p.slot_map for p in preps])
    return row


_RUNNERS = {"T1": _run_t1, "T2": _run_t2, "T3": _run_t3}


def _summary(rows: Sequence[dict], paths: Sequence[str]) -> dict:
    out = {}
    for path in paths:
        mine = [r for r in rows if r["path"] == path]
        out[path] = {
            "rounds": len(mine),
            "bytes_stored_total": sum(r["bytes_stored_total"] for r in mine),
            "bytes_moved_total": sum(r["bytes_moved"] for r in mine),
            "rope_calls_per_layer_total": sum(r["rope_calls_per_layer"] for r in mine),
            "selection_passes_total": sum(r["selection_passes"] for r in mine),
            "recomputed_tokens_total": sum(r["recomputed_tokens"] for r in mine),
            "storage_cost_dense_units_mean": sum(
                r["storage_cost_dense_units"] for r in mine
            ) / len(mine),
            "max_k_err": max(r["fidelity"]["max_k_err"] for r in mine),
            "max_v_err": max(r["fidelity"]["max_v_err"] for r in mine),
        }
    return out


def run_trace(spec: SimulationSpec, paths: Sequence[str] = PATHS) -> dict:
    """Run the configured rounds over the requested paths and return the
    report as a JSON-ready dict."""
    paths = tuple(paths)
    if not paths:
        raise ValueError("at least one path required")
    for path in paths:
        if path not in PATHS:
            raise ValueError(f"unknown path {path!r}")

    weights = build_weights(spec.model)
    states = {path: _PathState(spec) for path in paths}
    rows = []
    for round_id in range(spec.workload.num_rounds):
        rnd = generate_round(spec.workload, spec.model, round_id)
        oracles = [
            full_prefill(weights, flatten_prompt(p, spec.model.separator_token))
            for p in rnd.prompts
        ]
        seeds = None
        for path in paths:
            state = states[path]
            state.pool.reset_peak()
            if path in ("T2", "T3"):
                if seeds is None:
                    seeds = _round_seeds(spec, weights, rnd)
                _seed_path(state, seeds)
            ledger = CostLedger(spec.model.num_layers)
            rows.append(_RUNNERS[path](spec, weights, state, rnd, oracles, ledger))

    return {
        "schema": REPORT_SCHEMA,
        "config": spec_echo(spec, paths),
        "rows": rows,
        "summary": _summary(rows, paths),
    }

"""Self-contained invariant checks backing the ``verify`` CLI subcommand.

Each check is a small, seeded scenario that exercises one invariant the
engine relies on. Harness-level checks (equivalence, counter laws, report
determinism) honour the supplied simulation spec; unit-level checks run on
fixed micro configurations so a large spec does not slow them down.
"""
from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .collective import collective_recover, form_groups
from .core import (
    CacheBlockConfig,
    LayeredKv,
    ModelConfig,
    PositionSpan,
    PromptLayout,
    Segment,
    SegmentKind,
    flatten_prompt,
    token_digest,
)
from .diffstore import (
    DiffStore,
    MirrorHandle,
    deserialize_diff,
    diff_decode_dense,
    encode_diff,
    family_cost_from_ratio,
    serialize_diff,
)
from .ledger import CostLedger
from .paged_pool import OutOfSlotsError, PagedPool
from .pic import PicConfig, prepare_request, recover_prepared, select_important
from .restore import dense_restore, fused_restore
from .segment_index import SegmentCacheEntry, SegmentIndex, split_segments
from .toymodel import build_weights, full_prefill, rope_apply, rope_recover
from .trace import SimulationSpec, run_trace
from .workload import WorkloadSpec, decode_context, generate_round


def _micro_model() -> ModelConfig:
    return ModelConfig(num_layers=3, num_heads=2, head_dim=8, vocab_size=256, weight_seed=5)


def _random_layout(rng: np.random.Generator, vocab: int) -> PromptLayout:
    tail_kinds = (SegmentKind.SHARED_OUTPUT, SegmentKind.ROUND_TASK)
    segments = [
        Segment(
            tuple(rng.integers(0, vocab - 1, size=int(rng.integers(1, 9)))),
            SegmentKind.PRIVATE_HISTORY,
        )
    ]
    for _ in range(int(rng.integers(0, 4))):
        tokens = tuple(rng.integers(0, vocab - 1, size=int(rng.integers(1, 9))))
        segments.append(Segment(tokens, tail_kinds[int(rng.integers(0, 2))]))
    return PromptLayout(agent_id=0, segments=tuple(segments))


def check_flatten_split_roundtrip(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(101)
    separator = 255
    for _ in range(80):
        layout = _random_layout(rng, 256)
        flat = flatten_prompt(layout, separator)
        assert len(flat) == layout.flat_len
        pieces = split_segments(flat, separator)
        assert len(pieces) == len(layout.segments)
        starts = layout.segment_starts()
        for seg, piece, start in zip(layout.segments, pieces, starts):
            assert piece.tokens == seg.tokens
            assert piece.digest == seg.digest
            assert tuple(flat[start : start + len(seg)]) == seg.tokens
    return "80 random prompt layouts flatten and split consistently"


def check_digest_uniqueness(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(202)
    seen: dict[bytes, tuple] = {}
    for _ in range(20000):
        toks = tuple(int(t) for t in rng.integers(0, 64, size=int(rng.integers(1, 7))))
        digest = token_digest(toks)
        if digest in seen:
            assert seen[digest] == toks, f"digest collision between {seen[digest]} and {toks}"
        seen[digest] = toks
    return "no collisions across 20000 short token sequences"


def check_rotation_identities(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(303)
    k = rng.standard_normal((12, 2, 8)).astype(np.float32)
    span = PositionSpan.identity(np.arange(7, 19))
    assert np.array_equal(rope_recover(span, k), k), "zero-delta rotation must be a no-op"
    fwd = rope_apply(k, np.full(12, 5), base=10000.0)
    back = rope_apply(fwd, np.full(12, -5), base=10000.0)
    assert float(np.abs(back - k).max()) <= 1e-5, "apply(+d) then apply(-d) must cancel"

    model = _micro_model()
    weights = build_weights(model)
    tokens = rng.integers(0, model.vocab_size - 1, size=24)
    base_kv = full_prefill(weights, tokens, start_pos=0)
    shifted = full_prefill(weights, tokens, start_pos=40)
    span = PositionSpan(np.arange(40, 64), np.arange(0, 24))
    for layer in range(model.num_layers):
        moved = rope_recover(span, shifted.k[layer], base=model.rope_base)
        err = float(np.abs(moved - base_kv.k[layer]).max())
        assert err <= 1e-6, f"layer {layer} recover error {err}"
    return "zero-delta no-op, round trip, and cross-offset recovery all hold"


def check_selection_budget(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(404)
    for _ in range(200):
        n = int(rng.integers(1, 40))
        mags = np.abs(rng.standard_normal(n)).astype(np.float64)
        mags[rng.random(n) < 0.3] = 0.0
        frac = float(rng.choice([0.0, 0.1, 0.15, 0.5, 1.0]))
        budget = int(math.ceil(round(frac * n, 6)))
        chosen = select_important(mags, budget)
        nonzero = int(np.count_nonzero(mags))
        assert chosen.size == min(budget, nonzero)
        assert np.all(np.diff(chosen) > 0)
        assert np.all(mags[chosen] > 0)
    return "200 random selections respect budget, ordering, and zero exclusion"


def check_pool_conservation(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(505)
    pool = PagedPool(capacity_tokens=256, num_layers=2, num_heads=2, head_dim=8, block_size=32)
    live = []
    rid = 0
    for _ in range(300):
        if live and (rng.random() < 0.45 or len(live) > 6):
            pool.free(live.pop(int(rng.integers(0, len(live)))))
        else:
            try:
                live.append(pool.allocate(int(rng.integers(1, 70)), request_id=rid))
                rid += 1
            except OutOfSlotsError:
                if live:
                    pool.free(live.pop(0))
        pool.check_conservation()
    for handle in live:
        pool.free(handle)
    pool.check_conservation()
    assert pool.allocated_count == 0
    return "300 random allocate/free steps conserve slots exactly"


def _equivalence_round(num_agents: int, seed: int):
    model = ModelConfig(num_layers=3, num_heads=2, head_dim=8, vocab_size=512, weight_seed=9)
    weights = build_weights(model)
    workload = WorkloadSpec(
        num_agents=num_agents,
        num_rounds=1,
        history_len=12,
        shared_block_len=6,
        token_seed=seed,
        permutation_seed=seed + 1,
    )
    rnd = generate_round(workload, model, 0)
    store = DiffStore(CacheBlockConfig(32))
    index = SegmentIndex(budget_bytes=1 << 30, is_pinned=store.is_pinned)
    for agent, seg in enumerate(rnd.shared_outputs):
        ctx = decode_context(workload, model, 0, agent)
        stream = list(ctx) + [model.separator_token] + list(seg.tokens)
        kv = full_prefill(weights, stream)
        lo = len(ctx) + 1
        rows = LayeredKv(kv.k[:, lo:].copy(), kv.v[:, lo:].copy(), kv.positions[lo:].copy())
        master = store.register_dense(rows, tokens=seg.tokens)
        index.insert(
            SegmentCacheEntry(
                seg.digest, rows.positions, master, token_digest(ctx), rows.dense_nbytes
            )
        )
    cfg = PicConfig(recompute_fraction=0.15, check_layer=1)
    preps = [
        prepare_request(rnd.prompts[a], model, index, request_id=a)
        for a in range(num_agents)
    ]
    return weights, cfg, preps


def check_collective_matches_serial(spec: SimulationSpec) -> str:
    weights, cfg, preps = _equivalence_round(num_agents=3, seed=17)
    num_layers = weights.config.num_layers
    serial = {
        p.request_id: recover_prepared(weights, p, cfg, CostLedger(num_layers)) for p in preps
    }
    groups, remainder = form_groups(preps)
    assert len(groups) == 1 and not remainder, "homogeneous round must form one group"
    grouped, plan = collective_recover(weights, groups[0], cfg, CostLedger(num_layers))
    for rid, got in grouped.items():
        want = serial[rid]
        assert np.array_equal(got.kv.k, want.kv.k), f"request {rid}: K planes differ"
        assert np.array_equal(got.kv.v, want.kv.v), f"request {rid}: V planes differ"
        assert np.array_equal(got.important_positions, want.important_positions)
    assert plan.master_id == min(
        plan.deviation_scores, key=lambda rid: (plan.deviation_scores[rid], rid)
    )
    return "grouped recovery is bit-identical to serial for a 3-agent round"


def _small_spec(spec: SimulationSpec) -> SimulationSpec:
    return dataclasses.replace(
        spec,
        workload=WorkloadSpec(
            num_agents=3,
            num_rounds=2,
            history_len=16,
            shared_block_len=8,
            token_seed=spec.workload.token_seed,
            permutation_seed=spec.workload.permutation_seed,
        ),
    )


def check_call_count_law(spec: SimulationSpec) -> str:
    report = run_trace(_small_spec(spec), paths=("T2", "T3"))
    for row in report["rows"]:
        calls = row["rope_calls_per_layer"]
        if row["path"] == "T2":
            assert calls == row["num_requests"]
            assert row["selection_passes"] == row["num_requests"]
        else:
            units = row["num_groups"] + row["num_remainder"]
            assert calls == units
            assert row["selection_passes"] == units
    return "per-request vs per-group call counters obey the amortization law"


def check_diff_roundtrip(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(606)
    blocks = CacheBlockConfig(block_size=32)
    for _ in range(30):
        tokens = int(rng.integers(33, 161))
        k = rng.standard_normal((3, tokens, 2, 8)).astype(np.float32)
        v = rng.standard_normal((3, tokens, 2, 8)).astype(np.float32)
        master = LayeredKv(k, v, np.arange(tokens))
        mirror = master.copy()
        num_blocks = blocks.num_blocks(tokens)
        chosen = rng.choice(num_blocks, size=int(rng.integers(0, num_blocks + 1)), replace=False)
        hints = []
        for b in sorted(int(b) for b in chosen):
            lo, hi = blocks.block_bounds(b, tokens)
            mirror.k[:, lo:hi] += 1.0
            hints.extend(range(lo, hi))
        diff = encode_diff(master, mirror, np.asarray(hints, dtype=np.int64), blocks)
        back = deserialize_diff(serialize_diff(diff))
        rebuilt = diff_decode_dense(master, back)
        assert np.array_equal(rebuilt.k, mirror.k) and np.array_equal(rebuilt.v, mirror.v)
    return "30 random diffs survive encode, serialize, parse, and apply bit-for-bit"


def check_restore_equivalence(spec: SimulationSpec) -> str:
    rng = np.random.default_rng(707)
    blocks = CacheBlockConfig(block_size=32)
    store = DiffStore(blocks)
    for trial in range(10):
        tokens = int(rng.integers(40, 140))
        start = int(rng.integers(0, 50))
        k = rng.standard_normal((3, tokens, 2, 8)).astype(np.float32)
        v = rng.standard_normal((3, tokens, 2, 8)).astype(np.float32)
        master_kv = LayeredKv(k, v, np.arange(start, start + tokens))
        mirror_kv = master_kv.copy()
        b = int(rng.integers(0, blocks.num_blocks(tokens)))
        lo, hi = blocks.block_bounds(b, tokens)
        mirror_kv.k[:, lo:hi] -= 0.5
        mirror_kv.v[:, lo:hi] += 0.25
        master = store.register_dense(master_kv)
        diff = encode_diff(master_kv, mirror_kv, np.arange(lo, hi) + 0, blocks)
        handle = MirrorHandle(
            family_id=master.family_id, request_id=1, master=master, diff=diff
        )
        span = PositionSpan.shifted(master_kv.positions, 16)
        planes = []
        for restore in (fused_restore, dense_restore):
            pool = PagedPool(
                capacity_tokens=256, num_layers=3, num_heads=2, head_dim=8, block_size=32
            )
            slot_map = pool.allocate(tokens, request_id=1)
            restore(handle, span, pool, slot_map, rope_base=10000.0, ledger=CostLedger(3))
            planes.append([pool.read_rows(slot_map, layer) for layer in range(3)])
            pool.free(slot_map)
        for (fk, fv), (dk, dv) in zip(planes[0], planes[1]):
            assert np.array_equal(fk, dk) and np.array_equal(fv, dv), (
                f"trial {trial}: fused and dense restores disagree"
            )
    return "10 fused restores match the dense baseline bit-for-bit"


def check_family_cost_law(spec: SimulationSpec) -> str:
    for n, ratio in ((2, 4.0), (5, 9.9), (10, 11.2), (16, 17.5)):
        want = 1.0 + (n - 1) / ratio
        got = family_cost_from_ratio(n, ratio)
        assert abs(got - want) <= 1e-12
    return "family storage cost follows 1 + (n-1)/R exactly"


def check_report_determinism(spec: SimulationSpec) -> str:
    small = _small_spec(spec)
    first = json.dumps(run_trace(small), sort_keys=True)
    second = json.dumps(run_trace(small), sort_keys=True)
    assert first == second, "two identical runs must serialize identically"
    return "back-to-back simulations produce byte-identical reports"


CHECKS = (
    ("flatten_split_roundtrip", check_flatten_split_roundtrip),
    ("digest_uniqueness", check_digest_uniqueness),
    ("rotation_identities", check_rotation_identities),
    ("selection_budget", check_selection_budget),
    ("pool_conservation", check_pool_conservation),
    ("collective_matches_serial", check_collective_matches_serial),
    ("call_count_law", check_call_count_law),
    ("diff_roundtrip", check_diff_roundtrip),
    ("restore_equivalence", check_restore_equivalence),
    ("family_cost_law", check_family_cost_law),
    ("report_determinism", check_report_determinism),
)


def run_verify(spec: SimulationSpec) -> tuple[bool, list[str]]:
    """Run every named invariant check; returns (all_passed, report lines)."""
    lines = []
    all_ok = True
    for name, fn in CHECKS:
        try:
            detail = fn(spec)
            lines.append(f"PASS {name}: {detail}")
        except Exception as exc:  # noqa: BLE001 - verification must not abort midway
            all_ok = False
            lines.append(f"FAIL {name}: {exc}")
    return all_ok, lines

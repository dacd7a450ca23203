"""Round-based KV-cache reuse engine and desk-scale simulator."""

from .collective import ReuseGroup, ReusePlan, collective_recover, form_groups
from .config import ConfigError, build_spec, load_config
from .core import (
    CacheBlockConfig,
    LayeredKv,
    ModelConfig,
    PositionSpan,
    PromptLayout,
    Round,
    Segment,
    SegmentKind,
    flatten_prompt,
    kv_dense_nbytes,
    token_digest,
)
from .diffstore import (
    BlockSparseDiff,
    CompressionStats,
    DiffStore,
    HintSoundnessError,
    MalformedDiffError,
    MasterEntry,
    MirrorHandle,
    PinnedMasterError,
    deserialize_diff,
    diff_decode_dense,
    encode_diff,
    family_cost_from_ratio,
    serialize_diff,
)
from .ledger import CostLedger
from .paged_pool import OutOfSlotsError, PagedPool, SlotMap, UseAfterFreeError
from .pic import (
    PicConfig,
    PreparedRequest,
    RecoveryResult,
    prepare_request,
    recover_prepared,
    recover_request,
)
from .restore import dense_restore, fused_restore
from .segment_index import SegmentCacheEntry, SegmentIndex, split_segments
from .toymodel import (
    ModelWeights,
    build_weights,
    full_prefill,
    recompute_positions,
    rope_apply,
    rope_recover,
)
from .trace import (
    PATHS,
    REPORT_SCHEMA,
    RestoreMismatchError,
    SimulationSpec,
    run_trace,
)
from .verify import run_verify
from .workload import WorkloadSpec, decode_context, generate_round

__all__ = [
    "BlockSparseDiff",
    "CacheBlockConfig",
    "CompressionStats",
    "ConfigError",
    "CostLedger",
    "DiffStore",
    "HintSoundnessError",
    "LayeredKv",
    "MalformedDiffError",
    "MasterEntry",
    "MirrorHandle",
    "ModelConfig",
    "ModelWeights",
    "OutOfSlotsError",
    "PATHS",
    "PagedPool",
    "PicConfig",
    "PinnedMasterError",
    "PositionSpan",
    "PreparedRequest",
    "PromptLayout",
    "REPORT_SCHEMA",
    "RecoveryResult",
    "RestoreMismatchError",
    "ReuseGroup",
    "ReusePlan",
    "Round",
    "Segment",
    "SegmentCacheEntry",
    "SegmentIndex",
    "SegmentKind",
    "SimulationSpec",
    "SlotMap",
    "UseAfterFreeError",
    "WorkloadSpec",
    "build_spec",
    "build_weights",
    "collective_recover",
    "decode_context",
    "dense_restore",
    "deserialize_diff",
    "diff_decode_dense",
    "encode_diff",
    "family_cost_from_ratio",
    "flatten_prompt",
    "form_groups",
    "full_prefill",
    "fused_restore",
    "generate_round",
    "kv_dense_nbytes",
    "load_config",
    "prepare_request",
    "recompute_positions",
    "recover_prepared",
    "recover_request",
    "rope_apply",
    "rope_recover",
    "run_trace",
    "run_verify",
    "serialize_diff",
    "split_segments",
    "token_digest",
]

"""Block-masked reasoning toolkit: trace formats, block lifecycle tracking,
paged KV compaction, occupancy metrics, segmentation, annotation pipeline,
serving simulation and evaluation statistics."""

__version__ = "0.1.0"

from .trace import (
    AnnotatedTrace,
    BlockMaskingConfig,
    MarkerKind,
    MarkerVocabulary,
    ModelShape,
    SHAPE_PRESETS,
    Segment,
    TraceToken,
    flatten,
    parse_trace_record,
    serialize_trace_record,
)
from .state_machine import BlockStateMachine, Phase, ProtocolError
from .kv_store import KvStore, PagePool, SpanMap, bytes_per_token
from .kv_metrics import OccupancySample, OccupancyTrace, auc_kv, peak_kv, replay

__all__ = [
    "AnnotatedTrace",
    "BlockMaskingConfig",
    "BlockStateMachine",
    "KvStore",
    "MarkerKind",
    "MarkerVocabulary",
    "ModelShape",
    "OccupancySample",
    "OccupancyTrace",
    "PagePool",
    "Phase",
    "ProtocolError",
    "SHAPE_PRESETS",
    "Segment",
    "SpanMap",
    "TraceToken",
    "auc_kv",
    "bytes_per_token",
    "flatten",
    "parse_trace_record",
    "peak_kv",
    "replay",
    "serialize_trace_record",
]

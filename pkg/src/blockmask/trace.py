"""Domain types and on-disk formats for block/summary annotated reasoning traces.

A trace is a prompt, an ordered list of (block, summary) segments, and a final
answer. On disk each trace is one JSONL record; token sequences are integer
arrays with optional parallel ``*_text`` fields. The four framing markers are
not stored inside the arrays: they are implicit in the record structure and
materialized by :func:`flatten` using a marker vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator


class TraceError(Exception):
    """Base class for trace format errors."""


class TraceParseError(TraceError):
    """Record is not valid JSON or a field has the wrong type/shape."""


class TraceStructureError(TraceError):
    """Record parses but violates block/summary nesting invariants."""


class MarkerKind(Enum):
    """The four special tokens framing blocks and summaries."""

    BLOCK_START = "<|block_start|>"
    BLOCK_END = "<|block_end|>"
    SUMMARY_START = "<|summary_start|>"
    SUMMARY_END = "<|summary_end|>"

    @property
    def surface(self) -> str:
        return self.value


#: Default marker-id assignment used when no vocabulary sidecar is supplied.
#: Real deployments map surfaces onto model-specific ids via a sidecar file.
DEFAULT_MARKER_IDS = {
    MarkerKind.BLOCK_START: 0,
    MarkerKind.BLOCK_END: 1,
    MarkerKind.SUMMARY_START: 2,
    MarkerKind.SUMMARY_END: 3,
}


@dataclass(frozen=True)
class TraceToken:
    """One token: a non-negative id, optionally classified as a marker."""

    id: int
    marker: MarkerKind | None = None

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"token id must be non-negative, got {self.id}")

    @property
    def is_marker(self) -> bool:
        return self.marker is not None


class MarkerVocabulary:
    """Maps the four marker surfaces to token ids (and back).

    Loaded from a JSON sidecar ``{"<|block_start|>": 151665, ...}``. Ids must
    be distinct so that marker classification of a raw id stream is
    unambiguous.
    """

    def __init__(self, ids: dict[MarkerKind, int] | None = None):
        self._ids = dict(DEFAULT_MARKER_IDS if ids is None else ids)
        if set(self._ids) != set(MarkerKind):
            missing = [k.surface for k in MarkerKind if k not in self._ids]
            raise ValueError(f"vocabulary missing markers: {missing}")
        if len(set(self._ids.values())) != len(MarkerKind):
            raise ValueError("marker ids must be distinct")
        self._by_id = {v: k for k, v in self._ids.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "MarkerVocabulary":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        ids: dict[MarkerKind, int] = {}
        for kind in MarkerKind:
            if kind.surface not in raw:
                raise TraceParseError(f"vocabulary sidecar missing {kind.surface!r}")
            ids[kind] = int(raw[kind.surface])
        return cls(ids)

    def to_file(self, path: str | Path) -> None:
        data = {k.surface: v for k, v in self._ids.items()}
        Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")

    def id_of(self, kind: MarkerKind) -> int:
        return self._ids[kind]

    def token(self, kind: MarkerKind) -> TraceToken:
        return TraceToken(self._ids[kind], kind)

    def classify(self, token_id: int) -> MarkerKind | None:
        return self._by_id.get(token_id)

    def classify_token(self, token: TraceToken) -> MarkerKind | None:
        """Marker kind of a token, trusting an explicit tag over the id."""
        if token.marker is not None:
            return token.marker
        return self._by_id.get(token.id)


@dataclass(frozen=True)
class ModelShape:
    """KV-cache geometry of a model, driving the bytes-per-token conversion."""

    n_layers: int
    n_kv_heads: int
    head_dim: int
    bytes_per_elem: int = 2

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_kv_heads", "head_dim", "bytes_per_elem"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


#: Published shapes; anything else must be given explicitly.
SHAPE_PRESETS = {
    "qwen3-8b": ModelShape(36, 8, 128, 2),
    "qwen3-32b": ModelShape(64, 8, 128, 2),
    "phi4": ModelShape(40, 10, 128, 2),
}


@dataclass(frozen=True)
class BlockMaskingConfig:
    """Masking policy applied while consuming a token stream.

    keep_last_n_blocks: -1 disables masking, 0 compacts every completed
    block, N > 0 keeps the most recent N blocks visible.
    mask_delimiters: whether the block-framing marker pair is masked along
    with the block interior (summary framing always stays visible).
    block_token_cap: force a block end once the interior reaches this many
    tokens; None disables capping.
    """

    keep_last_n_blocks: int = -1
    mask_delimiters: bool = False
    compact_on_summary_end: bool = True
    block_token_cap: int | None = None
    prefix_caching_enabled: bool = False

    def __post_init__(self) -> None:
        if self.keep_last_n_blocks < -1:
            raise ValueError("keep_last_n_blocks must be >= -1")
        if self.block_token_cap is not None and self.block_token_cap < 1:
            raise ValueError("block_token_cap must be positive or None")
        if self.keep_last_n_blocks >= 0 and self.prefix_caching_enabled:
            raise ValueError(
                "prefix_caching_enabled must be False when block masking is active"
            )

    @property
    def masking_enabled(self) -> bool:
        return self.keep_last_n_blocks >= 0


@dataclass(frozen=True)
class Segment:
    """One (block, summary) pair. Interiors only; framing markers implicit."""

    block_tokens: tuple[TraceToken, ...]
    memento_tokens: tuple[TraceToken, ...]

    def __post_init__(self) -> None:
        for name, toks in (("block", self.block_tokens), ("summary", self.memento_tokens)):
            for t in toks:
                if t.is_marker:
                    raise TraceStructureError(
                        f"marker {t.marker.surface} inside {name} interior"
                    )


@dataclass
class AnnotatedTrace:
    """A reasoning trace: prompt, (block, memento) segments, final answer.

    ``extra`` holds unknown record fields so round-trips preserve them.
    """

    problem_id: str
    prompt_tokens: tuple[TraceToken, ...]
    segments: tuple[Segment, ...]
    answer_tokens: tuple[TraceToken, ...]
    metadata: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def flat_length(self) -> int:
        inner = sum(len(s.block_tokens) + len(s.memento_tokens) for s in self.segments)
        return len(self.prompt_tokens) + len(self.answer_tokens) + inner + 4 * len(self.segments)


def _token_seq(raw, field_name: str, vocab: MarkerVocabulary | None) -> tuple[TraceToken, ...]:
    if not isinstance(raw, list) or not all(isinstance(x, int) for x in raw):
        raise TraceParseError(f"field {field_name!r} must be an array of integers")
    if vocab is None:
        return tuple(TraceToken(x) for x in raw)
    return tuple(TraceToken(x, vocab.classify(x)) for x in raw)


def parse_trace_record(line: str, vocab: MarkerVocabulary | None = None) -> AnnotatedTrace:
    """Parse one JSONL record into an AnnotatedTrace.

    When ``vocab`` is given, raw ids matching marker ids are classified and a
    marker appearing inside a block/summary interior raises
    TraceStructureError (interiors must be marker-free).
    """
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as e:
        raise TraceParseError(f"record is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise TraceParseError("record must be a JSON object")

    known = {"problem_id", "prompt", "segments", "answer", "meta"}
    for name in ("problem_id", "prompt", "segments", "answer"):
        if name not in raw:
            raise TraceParseError(f"record missing field {name!r}")

    if not isinstance(raw["problem_id"], str):
        raise TraceParseError("field 'problem_id' must be a string")
    prompt = _token_seq(raw["prompt"], "prompt", vocab)
    answer = _token_seq(raw["answer"], "answer", vocab)

    if not isinstance(raw["segments"], list):
        raise TraceParseError("field 'segments' must be an array")
    segments = []
    for i, seg in enumerate(raw["segments"]):
        if not isinstance(seg, dict):
            raise TraceParseError(f"segment {i} must be an object")
        if "block" not in seg:
            raise TraceStructureError(f"segment {i} lacks block framing ('block' field)")
        if "summary" not in seg:
            raise TraceStructureError(f"segment {i} lacks summary framing ('summary' field)")
        segments.append(
            Segment(
                _token_seq(seg["block"], f"segments[{i}].block", vocab),
                _token_seq(seg["summary"], f"segments[{i}].summary", vocab),
            )
        )

    meta = raw.get("meta", {})
    if not isinstance(meta, dict):
        raise TraceParseError("field 'meta' must be an object")
    extra = {k: v for k, v in raw.items() if k not in known}
    return AnnotatedTrace(
        problem_id=raw["problem_id"],
        prompt_tokens=prompt,
        segments=tuple(segments),
        answer_tokens=answer,
        metadata={str(k): str(v) for k, v in meta.items()},
        extra=extra,
    )


def serialize_trace_record(trace: AnnotatedTrace) -> str:
    """Serialize to one JSONL line; inverse of :func:`parse_trace_record`."""
    record = {
        "problem_id": trace.problem_id,
        "prompt": [t.id for t in trace.prompt_tokens],
        "segments": [
            {"block": [t.id for t in s.block_tokens], "summary": [t.id for t in s.memento_tokens]}
            for s in trace.segments
        ],
        "answer": [t.id for t in trace.answer_tokens],
        "meta": trace.metadata,
    }
    record.update(trace.extra)
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def read_trace_file(path: str | Path, vocab: MarkerVocabulary | None = None) -> Iterator[AnnotatedTrace]:
    """Stream records from a JSONL file, one at a time, no cross-record state."""
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield parse_trace_record(line, vocab)


def write_trace_file(path: str | Path, traces: Iterable[AnnotatedTrace]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for trace in traces:
            f.write(serialize_trace_record(trace) + "\n")


def flatten(trace: AnnotatedTrace, vocab: MarkerVocabulary | None = None) -> list[TraceToken]:
    """Linearize a trace: prompt, then per segment
    [block_start, block..., block_end, summary_start, memento..., summary_end],
    then the answer.
    """
    vocab = vocab or MarkerVocabulary()
    out: list[TraceToken] = list(trace.prompt_tokens)
    for seg in trace.segments:
        out.append(vocab.token(MarkerKind.BLOCK_START))
        out.extend(seg.block_tokens)
        out.append(vocab.token(MarkerKind.BLOCK_END))
        out.append(vocab.token(MarkerKind.SUMMARY_START))
        out.extend(seg.memento_tokens)
        out.append(vocab.token(MarkerKind.SUMMARY_END))
    out.extend(trace.answer_tokens)
    return out

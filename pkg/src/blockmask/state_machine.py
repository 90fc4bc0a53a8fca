"""Per-request block/summary lifecycle tracking and compaction scheduling.

A :class:`BlockStateMachine` consumes one token at a time, follows the
Outside -> InBlock -> Outside -> InSummary -> Outside transitions driven by
the four marker tokens, and emits lifecycle events. When a summary closes and
masking is enabled, it emits a single :class:`CompactionRequest` covering the
spans of every completed block that falls outside the keep-last-N window.

The machine never fabricates tokens: when a block interior reaches the
configured cap it emits :class:`ForcedBlockEnd` and leaves the offending
token unconsumed; the driver is expected to inject a literal block-end marker
at that position and then re-feed the token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .trace import BlockMaskingConfig, MarkerKind, MarkerVocabulary, TraceToken


class ProtocolError(Exception):
    """Marker token not legal in the current phase."""

    def __init__(self, phase: "Phase", kind: MarkerKind, pos: int):
        super().__init__(f"{kind.surface} at position {pos} is illegal in phase {phase.name}")
        self.phase = phase
        self.kind = kind
        self.pos = pos


class PositionError(Exception):
    """Token fed at a position other than the next expected one."""


class Phase(Enum):
    OUTSIDE = "outside"
    IN_BLOCK = "in_block"
    IN_SUMMARY = "in_summary"


class BlockStatus(Enum):
    OPEN = "open"
    CLOSED = "closed"
    SUMMARIZED = "summarized"
    COMPACTED = "compacted"


@dataclass
class BlockRecord:
    """Spans and status of one block, in absolute logical positions."""

    index: int
    block_start_pos: int
    status: BlockStatus = BlockStatus.OPEN
    block_span: tuple[int, int] | None = None  # interior [start, end)
    block_end_pos: int | None = None
    summary_start_pos: int | None = None
    summary_span: tuple[int, int] | None = None
    summary_end_pos: int | None = None
    forced: bool = False

    def masked_span(self, mask_delimiters: bool) -> tuple[int, int]:
        """Span removed when this block compacts: the interior, widened to the
        block-framing markers when delimiters are masked too."""
        start, end = self.block_span
        if mask_delimiters:
            return (self.block_start_pos, self.block_end_pos + 1)
        return (start, end)


@dataclass(frozen=True)
class LifecycleEvent:
    pos: int

    def to_json(self) -> str:
        data = {"kind": type(self).__name__, "pos": self.pos}
        if isinstance(self, CompactionRequest):
            data["spans"] = [list(s) for s in self.spans]
        return json.dumps(data, separators=(",", ":"))


@dataclass(frozen=True)
class BlockOpened(LifecycleEvent):
    pass


@dataclass(frozen=True)
class BlockClosed(LifecycleEvent):
    pass


@dataclass(frozen=True)
class SummaryOpened(LifecycleEvent):
    pass


@dataclass(frozen=True)
class SummaryClosed(LifecycleEvent):
    pass


@dataclass(frozen=True)
class ForcedBlockEnd(LifecycleEvent):
    """Cap reached; the unconsumed token must be preceded by an injected
    block-end marker."""


@dataclass(frozen=True)
class CompactionRequest(LifecycleEvent):
    """Remove these spans (sorted, disjoint, strictly before ``pos``)."""

    spans: tuple[tuple[int, int], ...] = ()


class BlockStateMachine:
    """Tracks block lifecycle over a token stream for one request.

    Not safe for concurrent mutation; create one per request. ``strict``
    controls whether illegal marker transitions raise ProtocolError or are
    ignored (counted in ``protocol_violations``).
    """

    def __init__(
        self,
        config: BlockMaskingConfig,
        vocab: MarkerVocabulary | None = None,
        start_pos: int = 0,
        strict: bool = True,
    ):
        self.config = config
        self.vocab = vocab or MarkerVocabulary()
        self.strict = strict
        self.phase = Phase.OUTSIDE
        self.blocks: list[BlockRecord] = []
        self.protocol_violations = 0
        self._pos = start_pos
        self._summary_start: int | None = None
        self._event_log: list[LifecycleEvent] = []

    @property
    def next_pos(self) -> int:
        return self._pos

    @property
    def current_block(self) -> BlockRecord | None:
        if self.blocks and self.blocks[-1].status is BlockStatus.OPEN:
            return self.blocks[-1]
        return None

    def check_force_block_end(self, cap: int | None = None) -> bool:
        """True when the open block's interior has reached the cap."""
        cap = self.config.block_token_cap if cap is None else cap
        if cap is None or self.phase is not Phase.IN_BLOCK:
            return False
        block = self.blocks[-1]
        return self._pos - (block.block_start_pos + 1) >= cap

    def feed_token(self, token: TraceToken, pos: int) -> list[LifecycleEvent]:
        """Consume one token at the next expected position; return events.

        If the returned events contain :class:`ForcedBlockEnd` the token was
        NOT consumed: inject a block-end marker at ``pos`` and re-feed.
        """
        if pos != self._pos:
            raise PositionError(f"expected position {self._pos}, got {pos}")

        kind = self.vocab.classify_token(token)
        events: list[LifecycleEvent] = []

        if kind is None:
            if self.phase is Phase.IN_BLOCK and self.check_force_block_end():
                forced = ForcedBlockEnd(pos)
                self._event_log.append(forced)
                return [forced]
            self._pos += 1
            return events

        handler = {
            MarkerKind.BLOCK_START: self._on_block_start,
            MarkerKind.BLOCK_END: self._on_block_end,
            MarkerKind.SUMMARY_START: self._on_summary_start,
            MarkerKind.SUMMARY_END: self._on_summary_end,
        }[kind]
        try:
            events = handler(pos)
        except ProtocolError:
            if self.strict:
                raise
            self.protocol_violations += 1
            events = []
        self._pos += 1
        self._event_log.extend(events)
        return events

    def feed_block_end(self, pos: int, forced: bool = False) -> list[LifecycleEvent]:
        """Inject a block-end marker (used by drivers after ForcedBlockEnd)."""
        events = self.feed_token(self.vocab.token(MarkerKind.BLOCK_END), pos)
        if forced and self.blocks:
            self.blocks[-1].forced = True
        return events

    def _on_block_start(self, pos: int) -> list[LifecycleEvent]:
        if self.phase is not Phase.OUTSIDE:
            raise ProtocolError(self.phase, MarkerKind.BLOCK_START, pos)
        self.blocks.append(BlockRecord(index=len(self.blocks), block_start_pos=pos))
        self.phase = Phase.IN_BLOCK
        return [BlockOpened(pos)]

    def _on_block_end(self, pos: int) -> list[LifecycleEvent]:
        if self.phase is not Phase.IN_BLOCK:
            raise ProtocolError(self.phase, MarkerKind.BLOCK_END, pos)
        block = self.blocks[-1]
        block.block_span = (block.block_start_pos + 1, pos)
        block.block_end_pos = pos
        block.status = BlockStatus.CLOSED
        self.phase = Phase.OUTSIDE
        return [BlockClosed(pos)]

    def _on_summary_start(self, pos: int) -> list[LifecycleEvent]:
        # Legal only right after a closed, not-yet-summarized block.
        if (
            self.phase is not Phase.OUTSIDE
            or not self.blocks
            or self.blocks[-1].status is not BlockStatus.CLOSED
        ):
            raise ProtocolError(self.phase, MarkerKind.SUMMARY_START, pos)
        self.blocks[-1].summary_start_pos = pos
        self._summary_start = pos + 1
        self.phase = Phase.IN_SUMMARY
        return [SummaryOpened(pos)]

    def _on_summary_end(self, pos: int) -> list[LifecycleEvent]:
        if self.phase is not Phase.IN_SUMMARY:
            raise ProtocolError(self.phase, MarkerKind.SUMMARY_END, pos)
        block = self.blocks[-1]
        block.summary_span = (self._summary_start, pos)
        block.summary_end_pos = pos
        block.status = BlockStatus.SUMMARIZED
        self._summary_start = None
        self.phase = Phase.OUTSIDE

        events: list[LifecycleEvent] = [SummaryClosed(pos)]
        if self.config.compact_on_summary_end and self.config.masking_enabled:
            spans = self._collect_evictable(pos)
            if spans:
                events.append(CompactionRequest(pos, spans))
        return events

    def _collect_evictable(self, pos: int) -> tuple[tuple[int, int], ...]:
        """Mark all completed blocks beyond the keep-last-N window compacted
        and return their spans."""
        completed = [
            b for b in self.blocks if b.status in (BlockStatus.CLOSED, BlockStatus.SUMMARIZED)
        ]
        keep = self.config.keep_last_n_blocks
        evict = completed if keep == 0 else completed[:-keep]
        spans = []
        for block in evict:
            block.status = BlockStatus.COMPACTED
            span = block.masked_span(self.config.mask_delimiters)
            if span[0] < span[1]:  # empty interiors have nothing to remove
                spans.append(span)
        return tuple(sorted(spans))

    def masked_spans(self, config: BlockMaskingConfig | None = None) -> list[tuple[int, int]]:
        """Spans currently invisible to the next query position: interiors of
        compacted blocks, widened to their framing markers when
        ``mask_delimiters`` is set. Adjacent spans are merged."""
        mask_delims = (config or self.config).mask_delimiters
        spans = sorted(
            span
            for b in self.blocks
            if b.status is BlockStatus.COMPACTED
            for span in [b.masked_span(mask_delims)]
            if span[0] < span[1]
        )
        merged: list[tuple[int, int]] = []
        for start, end in spans:
            if merged and start <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], end))
            else:
                merged.append((start, end))
        return merged

    def event_log_jsonl(self) -> str:
        """Debug export of all events seen so far, one JSON object per line."""
        return "\n".join(e.to_json() for e in self._event_log)


def apply_block_cap(
    tokens: Sequence[TraceToken],
    cap: int,
    vocab: MarkerVocabulary | None = None,
) -> list[TraceToken]:
    """Rewrite a flattened stream so no block interior exceeds ``cap`` tokens.

    Oversized interiors are split by injecting a block-end marker followed by
    a fresh block-start, mirroring what an engine does when it forces a block
    end mid-generation. Earlier chunks end up closed-unsummarized; the final
    chunk keeps the original summary.
    """
    if cap < 1:
        raise ValueError("cap must be positive")
    vocab = vocab or MarkerVocabulary()
    out: list[TraceToken] = []
    in_block = False
    interior = 0
    for token in tokens:
        kind = vocab.classify_token(token)
        if kind is MarkerKind.BLOCK_START:
            in_block, interior = True, 0
        elif kind is MarkerKind.BLOCK_END:
            in_block = False
        elif kind is None and in_block:
            if interior >= cap:
                out.append(vocab.token(MarkerKind.BLOCK_END))
                out.append(vocab.token(MarkerKind.BLOCK_START))
                interior = 0
            interior += 1
        out.append(token)
    return out

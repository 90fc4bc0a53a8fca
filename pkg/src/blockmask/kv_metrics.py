"""Offline replay of generated token streams into KV occupancy trajectories.

Replay walks a flattened trace token by token through the lifecycle machine
and records one occupancy sample per generated token. Samples are the settled
post-eviction state, so summary-end steps show the characteristic sawtooth
drop; the transient high-water mark (the summary-end token enters the cache
before its block is evicted) is tracked separately as ``peak_tokens`` and is
what the peak metric of a replay reports.

GB means 10^9 bytes throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .kv_store import bytes_per_token
from .state_machine import BlockStateMachine, CompactionRequest, apply_block_cap
from .trace import BlockMaskingConfig, MarkerVocabulary, ModelShape, TraceToken

GB = 10**9


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class OccupancySample:
    tokens_generated: int
    cached_tokens: int
    cached_bytes: int


@dataclass
class OccupancyTrace:
    """Per-generation-step cache occupancy for one request."""

    shape: ModelShape
    prompt_tokens: int
    samples: list[OccupancySample] = field(default_factory=list)
    peak_tokens: int = 0  # includes the transient pre-eviction state
    compaction_count: int = 0

    def final_tokens(self) -> int:
        return self.samples[-1].cached_tokens if self.samples else self.prompt_tokens


@dataclass
class KvReport:
    peak_gb: float
    auc_gb_ktok: float
    total_tokens: int
    compaction_count: int


def replay(
    tokens: Sequence[TraceToken],
    config: BlockMaskingConfig,
    shape: ModelShape,
    prompt_len: int,
    vocab: MarkerVocabulary | None = None,
    strict: bool = False,
) -> OccupancyTrace:
    """Replay a flattened request (prompt + generation) step by step.

    ``tokens[prompt_len:]`` is treated as the generated stream; the prompt
    contributes occupancy but no samples. When ``config.block_token_cap`` is
    set, block-end markers are injected wherever generation would have been
    forced to close a block, shifting later positions accordingly.
    """
    if prompt_len < 0 or prompt_len > len(tokens):
        raise MetricsError(f"prompt_len {prompt_len} outside [0, {len(tokens)}]")
    vocab = vocab or MarkerVocabulary()
    machine = BlockStateMachine(config, vocab=vocab, start_pos=prompt_len, strict=strict)
    bpt = bytes_per_token(shape)
    trace = OccupancyTrace(shape=shape, prompt_tokens=prompt_len, peak_tokens=prompt_len)

    generated = list(tokens[prompt_len:])
    if config.block_token_cap is not None:
        generated = apply_block_cap(generated, config.block_token_cap, vocab)

    cached = prompt_len
    for step, token in enumerate(generated, start=1):
        cached += 1
        trace.peak_tokens = max(trace.peak_tokens, cached)
        for event in machine.feed_token(token, machine.next_pos):
            if isinstance(event, CompactionRequest):
                cached -= sum(e - s for s, e in event.spans)
                trace.compaction_count += 1
        trace.samples.append(OccupancySample(step, cached, cached * bpt))
    return trace


def peak_kv(trace: OccupancyTrace) -> float:
    """Peak occupancy in GB: max over samples of cached bytes (0 if empty)."""
    if not trace.samples:
        return 0.0
    return max(s.cached_bytes for s in trace.samples) / GB


def auc_kv(trace: OccupancyTrace) -> float:
    """Area under the occupancy curve in GB*ktok: one-token-wide left steps."""
    return sum(s.cached_bytes for s in trace.samples) / GB / 1000.0


def report(trace: OccupancyTrace) -> KvReport:
    """Summary metrics for one replayed request.

    Peak uses the transient high-water mark when the trace carries one
    (replays do); series loaded from plain samples fall back to the sample
    maximum.
    """
    sample_peak = max((s.cached_tokens for s in trace.samples), default=0)
    peak_tokens = max(trace.peak_tokens, sample_peak)
    return KvReport(
        peak_gb=peak_tokens * bytes_per_token(trace.shape) / GB,
        auc_gb_ktok=auc_kv(trace),
        total_tokens=len(trace.samples),
        compaction_count=trace.compaction_count,
    )


def aggregate(
    reports: Sequence[KvReport],
    labels: Sequence[str],
    baseline_label: str | None = None,
) -> list[dict]:
    """Per-group means with optional multiplicative ratios vs a baseline group.

    Returns rows {group, n, mean_peak_gb, mean_auc_gb_ktok} plus
    peak_ratio_vs_baseline / auc_ratio_vs_baseline when a baseline is named.
    """
    if len(reports) != len(labels):
        raise MetricsError("reports and labels must be parallel")
    if not reports:
        raise MetricsError("cannot aggregate an empty report list")
    groups: dict[str, list[KvReport]] = {}
    for rep, label in zip(reports, labels):
        groups.setdefault(label, []).append(rep)
    if baseline_label is not None and baseline_label not in groups:
        raise MetricsError(f"baseline group {baseline_label!r} not present")

    rows = []
    for label, members in groups.items():
        rows.append(
            {
                "group": label,
                "n": len(members),
                "mean_peak_gb": sum(r.peak_gb for r in members) / len(members),
                "mean_auc_gb_ktok": sum(r.auc_gb_ktok for r in members) / len(members),
            }
        )
    if baseline_label is not None:
        base = next(r for r in rows if r["group"] == baseline_label)
        for row in rows:
            row["peak_ratio_vs_baseline"] = row["mean_peak_gb"] / base["mean_peak_gb"]
            row["auc_ratio_vs_baseline"] = row["mean_auc_gb_ktok"] / base["mean_auc_gb_ktok"]
    return rows


def write_kv_trace_csv(trace: OccupancyTrace, path: str | Path) -> None:
    """Export one request's trajectory: tokens_generated, cached_tokens, cached_bytes."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["tokens_generated", "cached_tokens", "cached_bytes"])
        for s in trace.samples:
            writer.writerow([s.tokens_generated, s.cached_tokens, s.cached_bytes])


def load_series_csv(path: str | Path, shape: ModelShape) -> OccupancyTrace:
    """Load a (tokens, gb) or (tokens_generated, cached_tokens, cached_bytes)
    CSV as an OccupancyTrace for metric extraction.

    Two-column series quantize GB values to whole cached tokens so the
    bytes = tokens * bytes_per_token relation holds for loaded samples.
    """
    bpt = bytes_per_token(shape)
    trace = OccupancyTrace(shape=shape, prompt_tokens=0)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)  # header
        for row in reader:
            if not row:
                continue
            if len(row) >= 3:
                tokens, cached, cached_bytes = int(row[0]), int(row[1]), int(row[2])
            else:
                tokens = int(float(row[0]))
                cached = round(float(row[1]) * GB / bpt)
                cached_bytes = cached * bpt
            trace.samples.append(OccupancySample(tokens, cached, cached_bytes))
    trace.peak_tokens = max((s.cached_tokens for s in trace.samples), default=0)
    return trace

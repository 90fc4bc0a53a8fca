"""Deterministic multi-request serving simulator over a finite KV page pool.

Unit-cost step model: every active request decodes one token per engine
step; prefill advances in fixed-size chunks, one chunk per step, charged in
tokens. Requests replay pre-recorded flattened traces. Admission is FCFS with
head-of-line blocking: a queued request is admitted at the earliest step
where the pool can hold its prompt pages.

Modes:
  vanilla   no masking, cache grows monotonically, freed only at completion
  memento   compaction requests are applied at the end of each step
  restart   at each summary end the cache is discarded and a re-prefill of
            prompt + all memento interiors so far is charged before decoding
            resumes

Throughput figures from real hardware are deliberately out of scope; the
simulator reproduces the mechanism (KV-bound admission) only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .kv_metrics import OccupancySample, OccupancyTrace
from .kv_store import KvStore, PagePool, bytes_per_token
from .state_machine import (
    BlockStateMachine,
    CompactionRequest,
    Phase,
    SummaryClosed,
    apply_block_cap,
)
from .trace import (
    BlockMaskingConfig,
    MarkerVocabulary,
    ModelShape,
    TraceToken,
)


class SimulationError(Exception):
    pass


class InfeasibleWorkloadError(SimulationError):
    def __init__(self, request_id: str, reason: str):
        super().__init__(f"request {request_id!r} cannot be served: {reason}")
        self.request_id = request_id


class Mode(Enum):
    VANILLA = "vanilla"
    MEMENTO = "memento"
    MEMENTO_RESTART = "restart"


@dataclass(frozen=True)
class PoolConfig:
    total_pages: int
    page_size: int

    def __post_init__(self) -> None:
        if self.total_pages < 1 or self.page_size < 1:
            raise ValueError("total_pages and page_size must be positive")

    @property
    def capacity_tokens(self) -> int:
        return self.total_pages * self.page_size


@dataclass
class Request:
    request_id: str
    tokens: list[TraceToken]  # full flattened trace, prompt included
    prompt_len: int
    arrival_step: int

    def __post_init__(self) -> None:
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.prompt_len >= len(self.tokens):
            raise ValueError("trace must extend past the prompt")


@dataclass
class Workload:
    requests: list[Request]
    config: BlockMaskingConfig
    shape: ModelShape
    prefill_chunk: int = 512
    vocab: MarkerVocabulary = field(default_factory=MarkerVocabulary)

    def __post_init__(self) -> None:
        arrivals = [r.arrival_step for r in self.requests]
        if arrivals != sorted(arrivals):
            raise ValueError("arrival steps must be non-decreasing in list order")
        if self.prefill_chunk < 1:
            raise ValueError("prefill_chunk must be positive")


@dataclass
class RequestReport:
    request_id: str
    admit_step: int
    finish_step: int
    peak_tokens: int
    compactions: int
    prefill_token_steps: int
    blocked: bool  # waited past its arrival step for pool pages


@dataclass
class SimReport:
    mode: str
    total_engine_steps: int
    pool_peak_pages: int
    requests: dict[str, RequestReport]
    active_per_step: list[int]
    occupancy: dict[str, OccupancyTrace]

    @property
    def any_blocked_admission(self) -> bool:
        return any(r.blocked for r in self.requests.values())

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "total_engine_steps": self.total_engine_steps,
                "pool_peak_pages": self.pool_peak_pages,
                "active_per_step": self.active_per_step,
                "requests": {
                    rid: {
                        "admit_step": r.admit_step,
                        "finish_step": r.finish_step,
                        "peak_tokens": r.peak_tokens,
                        "compactions": r.compactions,
                        "prefill_token_steps": r.prefill_token_steps,
                        "blocked": r.blocked,
                    }
                    for rid, r in self.requests.items()
                },
            },
            indent=2,
            sort_keys=True,
        )


def _effective_config(config: BlockMaskingConfig, mode: Mode) -> BlockMaskingConfig:
    if mode is Mode.VANILLA:
        # Same capped token stream as the other modes, but no masking.
        return BlockMaskingConfig(keep_last_n_blocks=-1, block_token_cap=config.block_token_cap)
    return config


class _ActiveRequest:
    """Mutable per-request simulation state."""

    def __init__(
        self,
        req: Request,
        workload: Workload,
        pool: PagePool | None,
        page_size: int,
        mode: Mode,
        admit_step: int,
    ):
        config = _effective_config(workload.config, mode)
        self.req = req
        self.mode = mode
        self.shape = workload.shape
        self.page_size = page_size
        self.pool = pool
        self.store = KvStore(workload.shape, page_size=page_size, pool=pool)
        self.machine = BlockStateMachine(
            config, vocab=workload.vocab, start_pos=req.prompt_len, strict=False
        )
        generated = list(req.tokens[req.prompt_len :])
        if config.block_token_cap is not None:
            generated = apply_block_cap(generated, config.block_token_cap, workload.vocab)
        self.generated = generated
        self.vocab = workload.vocab
        self.admit_step = admit_step
        self.next_token = 0
        self.peak_tokens = 0
        self.compactions = 0
        self.prefill_token_steps = 0
        self.memento_interior_tokens = 0
        self._pending_prefill = req.prompt_len
        self._in_summary_interior = 0
        self.samples: list[OccupancySample] = []

    @property
    def prefilling(self) -> bool:
        return self._pending_prefill > 0

    @property
    def done(self) -> bool:
        return self.next_token >= len(self.generated)

    def prefill_step(self, chunk: int) -> None:
        take = min(chunk, self._pending_prefill)
        self._pending_prefill -= take
        self.prefill_token_steps += take
        self.store.append(take)
        self.peak_tokens = max(self.peak_tokens, self.store.used_tokens)

    def decode_step(self) -> None:
        token = self.generated[self.next_token]
        self.next_token += 1
        self.store.append(1)
        self.peak_tokens = max(self.peak_tokens, self.store.used_tokens)

        in_summary = self.machine.phase is Phase.IN_SUMMARY
        if in_summary and self.vocab.classify_token(token) is None:
            self._in_summary_interior += 1

        for event in self.machine.feed_token(token, self.machine.next_pos):
            if isinstance(event, CompactionRequest) and self.mode is Mode.MEMENTO:
                # Spans are absolute positions; the store's logical space is
                # aligned because prefill appended prompt_len tokens first.
                self.store.compact([tuple(s) for s in event.spans])
                self.compactions += 1
            elif isinstance(event, SummaryClosed) and self.mode is Mode.MEMENTO_RESTART:
                self.memento_interior_tokens += self._in_summary_interior
                self._in_summary_interior = 0
                self._restart()

    def _restart(self) -> None:
        """Discard the cache; schedule a re-prefill of prompt + mementos."""
        self.store.release_all()
        self.store = KvStore(self.shape, page_size=self.page_size, pool=self.pool)
        self._pending_prefill = self.req.prompt_len + self.memento_interior_tokens
        # cannot fail: the discard freed at least this many pages
        self.store.reserve_tokens(self._pending_prefill)
        self.compactions += 1

    def record_sample(self) -> None:
        tokens = self.store.used_tokens
        self.samples.append(
            OccupancySample(
                tokens_generated=self.next_token,
                cached_tokens=tokens,
                cached_bytes=tokens * bytes_per_token(self.shape),
            )
        )


def _standalone_peak_pages(req: Request, workload: Workload, mode: Mode, page_size: int) -> int:
    """Peak pages this request needs alone, for the feasibility precheck."""
    state = _ActiveRequest(req, workload, None, page_size, mode, admit_step=0)
    while state.prefilling:
        state.prefill_step(workload.prefill_chunk)
    while not state.done:
        state.decode_step()
        while state.prefilling:  # restart re-prefill
            state.prefill_step(workload.prefill_chunk)
    return -(-state.peak_tokens // page_size)


def run(workload: Workload, pool_config: PoolConfig, mode: Mode | str) -> SimReport:
    """Simulate the workload to completion; deterministic for fixed inputs."""
    mode = Mode(mode) if isinstance(mode, str) else mode

    for req in workload.requests:
        need = _standalone_peak_pages(req, workload, mode, pool_config.page_size)
        if need > pool_config.total_pages:
            raise InfeasibleWorkloadError(
                req.request_id,
                f"standalone peak of {need} pages exceeds pool of {pool_config.total_pages}",
            )

    pool = PagePool(pool_config.total_pages)
    queue: list[Request] = list(workload.requests)
    active: list[_ActiveRequest] = []
    finished: dict[str, RequestReport] = {}
    active_per_step: list[int] = []
    occupancy: dict[str, OccupancyTrace] = {}

    step = 0
    while queue or active:
        # FCFS admission with head-of-line blocking. Prompt pages are
        # reserved at admission, and one page of headroom per resident keeps
        # admission from starving the residents' same-step growth (a decode
        # step allocates at most one page per request).
        while queue and queue[0].arrival_step <= step:
            head = queue[0]
            need = -(-head.prompt_len // pool_config.page_size)
            if need + len(active) > pool.free_pages:
                break
            state = _ActiveRequest(
                head, workload, pool, pool_config.page_size, mode, admit_step=step
            )
            state.store.reserve_tokens(head.prompt_len)
            active.append(state)
            queue.pop(0)

        active_per_step.append(len(active))
        if not active:
            step += 1
            continue

        for state in active:
            try:
                if state.prefilling:
                    state.prefill_step(workload.prefill_chunk)
                else:
                    state.decode_step()
            except Exception as e:
                raise InfeasibleWorkloadError(
                    state.req.request_id, f"pool cannot serve growth at step {step}: {e}"
                ) from e
            state.record_sample()

        still_active = []
        for state in active:
            if state.done and not state.prefilling:
                state.store.release_all()
                finished[state.req.request_id] = RequestReport(
                    request_id=state.req.request_id,
                    admit_step=state.admit_step,
                    finish_step=step,
                    peak_tokens=state.peak_tokens,
                    compactions=state.compactions,
                    prefill_token_steps=state.prefill_token_steps,
                    blocked=state.admit_step > state.req.arrival_step,
                )
                occupancy[state.req.request_id] = OccupancyTrace(
                    shape=workload.shape,
                    prompt_tokens=state.req.prompt_len,
                    samples=state.samples,
                    peak_tokens=state.peak_tokens,
                    compaction_count=state.compactions,
                )
            else:
                still_active.append(state)
        active = still_active
        step += 1

    return SimReport(
        mode=mode.value,
        total_engine_steps=step,
        pool_peak_pages=pool.peak_pages,
        requests=finished,
        active_per_step=active_per_step,
        occupancy=occupancy,
    )


def export_sawtooth(report: SimReport, request_id: str, path: str | Path) -> None:
    """Write one request's per-step (tokens_generated, cached_bytes) series."""
    if request_id not in report.occupancy:
        raise SimulationError(f"unknown request id {request_id!r}")
    trace = report.occupancy[request_id]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["tokens_generated", "cached_bytes"])
        for s in trace.samples:
            writer.writerow([s.tokens_generated, s.cached_bytes])


def count_drops(samples: Sequence[OccupancySample]) -> int:
    """Number of steps where occupancy fell below the previous step."""
    drops = 0
    for prev, cur in zip(samples, samples[1:]):
        if cur.cached_bytes < prev.cached_bytes:
            drops += 1
    return drops

"""Shared fixtures: random trace generation and independent oracles.

The oracles here deliberately avoid the library's own bookkeeping: visibility
is computed by tagging every position and applying the keep-last-N rule
directly, and the dense KV oracle materializes the kept-token list.
"""

from __future__ import annotations

import random

import pytest

from blockmask.trace import (
    AnnotatedTrace,
    MarkerKind,
    MarkerVocabulary,
    Segment,
    TraceToken,
)

PLAIN_BASE = 100  # plain token ids start here, clear of the default marker ids


@pytest.fixture
def vocab() -> MarkerVocabulary:
    return MarkerVocabulary()


def plain(n: int, rng: random.Random | None = None) -> list[TraceToken]:
    if rng is None:
        return [TraceToken(PLAIN_BASE + i) for i in range(n)]
    return [TraceToken(PLAIN_BASE + rng.randrange(5000)) for _ in range(n)]


def make_annotated_trace(
    rng: random.Random,
    problem_id: str = "p0",
    max_segments: int = 4,
    max_block: int = 30,
    max_memento: int = 8,
    max_prompt: int = 12,
    max_answer: int = 6,
) -> AnnotatedTrace:
    segments = tuple(
        Segment(
            tuple(plain(rng.randint(0, max_block), rng)),
            tuple(plain(rng.randint(0, max_memento), rng)),
        )
        for _ in range(rng.randint(0, max_segments))
    )
    return AnnotatedTrace(
        problem_id=problem_id,
        prompt_tokens=tuple(plain(rng.randint(1, max_prompt), rng)),
        segments=segments,
        answer_tokens=tuple(plain(rng.randint(0, max_answer), rng)),
        metadata={"domain": rng.choice(["math", "code", "science"])},
    )


def make_token_stream(
    rng: random.Random,
    vocab: MarkerVocabulary,
    max_segments: int = 5,
    max_block: int = 40,
    max_memento: int = 10,
    allow_unsummarized: bool = True,
    allow_trailing_open: bool = True,
    interstitial: bool = True,
) -> list[TraceToken]:
    """A well-formed generated stream: blocks, optional summaries, optional
    outside filler, optionally ending mid-block."""
    out: list[TraceToken] = []
    for _ in range(rng.randint(0, max_segments)):
        if interstitial and rng.random() < 0.3:
            out.extend(plain(rng.randint(1, 5), rng))
        out.append(vocab.token(MarkerKind.BLOCK_START))
        out.extend(plain(rng.randint(0, max_block), rng))
        out.append(vocab.token(MarkerKind.BLOCK_END))
        if not (allow_unsummarized and rng.random() < 0.25):
            out.append(vocab.token(MarkerKind.SUMMARY_START))
            out.extend(plain(rng.randint(0, max_memento), rng))
            out.append(vocab.token(MarkerKind.SUMMARY_END))
    if allow_trailing_open and rng.random() < 0.2:
        out.append(vocab.token(MarkerKind.BLOCK_START))
        out.extend(plain(rng.randint(0, max_block), rng))
    elif interstitial and rng.random() < 0.5:
        out.extend(plain(rng.randint(1, 8), rng))
    return out


def naive_masked_spans(
    tokens: list[TraceToken],
    start_pos: int,
    keep: int,
    mask_delimiters: bool,
    vocab: MarkerVocabulary,
) -> list[tuple[int, int]]:
    """Independent visibility oracle: tag every position, then at each summary
    end mask all completed blocks beyond the most recent ``keep``."""
    if keep < 0:
        return []
    blocks: list[dict] = []
    open_block: dict | None = None
    masked: set[int] = set()
    for offset, token in enumerate(tokens):
        pos = start_pos + offset
        kind = vocab.classify_token(token)
        if kind is MarkerKind.BLOCK_START:
            open_block = {"bs": pos, "be": None, "masked": False}
        elif kind is MarkerKind.BLOCK_END:
            open_block["be"] = pos
            blocks.append(open_block)
            open_block = None
        elif kind is MarkerKind.SUMMARY_END:
            visible = [b for b in blocks if not b["masked"]]
            to_mask = visible if keep == 0 else visible[: len(visible) - keep]
            for b in to_mask:
                b["masked"] = True
                lo = b["bs"] if mask_delimiters else b["bs"] + 1
                hi = b["be"] + 1 if mask_delimiters else b["be"]
                masked.update(range(lo, hi))
    spans: list[list[int]] = []
    for p in sorted(masked):
        if spans and spans[-1][1] == p:
            spans[-1][1] = p + 1
        else:
            spans.append([p, p + 1])
    return [(a, b) for a, b in spans]


def make_serving_request(rid, prompt, segments, answer=0, arrival=0, vocab=None):
    from blockmask.serving import Request

    vocab = vocab or MarkerVocabulary()
    tokens = list(plain(prompt))
    for block, memento in segments:
        tokens.append(vocab.token(MarkerKind.BLOCK_START))
        tokens.extend(plain(block))
        tokens.append(vocab.token(MarkerKind.BLOCK_END))
        tokens.append(vocab.token(MarkerKind.SUMMARY_START))
        tokens.extend(plain(memento))
        tokens.append(vocab.token(MarkerKind.SUMMARY_END))
    tokens.extend(plain(answer))
    return Request(request_id=rid, tokens=tokens, prompt_len=prompt, arrival_step=arrival)


def make_wave_workload(rng: random.Random, vocab: MarkerVocabulary):
    """Workload whose vanilla run must serialize: arrivals track the vanilla
    schedule so each request lands shortly before its predecessor finishes,
    with a pool too small to hold two prompts plus a resident near peak."""
    from blockmask.serving import PoolConfig, Workload
    from blockmask.trace import BlockMaskingConfig, ModelShape

    n_seg = rng.randint(2, 4)
    prompt = rng.randint(20, 40)
    blocks = [(rng.randint(10, 22), rng.randint(2, 5)) for _ in range(n_seg)]
    answer = rng.randint(2, 8)
    gen_len = sum(b + m + 4 for b, m in blocks) + answer
    peak = prompt + gen_len
    slack = rng.randint(2, 8)
    pool = peak + prompt - 1 - slack
    requests = [make_serving_request("r0", prompt, blocks, answer, 0, vocab)]
    admit_v = 0
    for i in range(1, rng.randint(2, 4)):
        finish_prev = admit_v + gen_len
        arrival = finish_prev - rng.randint(1, slack)
        requests.append(make_serving_request(f"r{i}", prompt, blocks, answer, arrival, vocab))
        admit_v = finish_prev + 1
    workload = Workload(
        requests=requests,
        config=BlockMaskingConfig(keep_last_n_blocks=0),
        shape=ModelShape(1, 1, 1, 1),
        prefill_chunk=512,
        vocab=vocab,
    )
    return workload, PoolConfig(total_pages=pool, page_size=1)


def make_ample_workload(rng: random.Random, vocab: MarkerVocabulary):
    """Workload with enough pool for full concurrency (never blocks)."""
    from blockmask.serving import PoolConfig, Workload
    from blockmask.trace import BlockMaskingConfig, ModelShape

    requests = []
    arrival = 0
    for i in range(rng.randint(2, 5)):
        n_seg = rng.randint(1, 4)
        blocks = [(rng.randint(5, 25), rng.randint(1, 5)) for _ in range(n_seg)]
        requests.append(
            make_serving_request(
                f"r{i}", rng.randint(3, 15), blocks, rng.randint(0, 8), arrival, vocab
            )
        )
        arrival += rng.randint(0, 5)
    workload = Workload(
        requests=requests,
        config=BlockMaskingConfig(keep_last_n_blocks=0),
        shape=ModelShape(1, 1, 1, 1),
        prefill_chunk=512,
        vocab=vocab,
    )
    cap = sum(len(r.tokens) for r in requests) + 50
    return workload, PoolConfig(total_pages=cap, page_size=1)


class DenseKvOracle:
    """Materialized kept-token list; every operation is brute force."""

    def __init__(self, page_size: int):
        self.page_size = page_size
        self.kept: list[int] = []
        self.logical_size = 0

    def append(self, n: int) -> None:
        self.kept.extend(range(self.logical_size, self.logical_size + n))
        self.logical_size += n

    def compact(self, spans: list[tuple[int, int]]) -> None:
        drop = set()
        for s, e in spans:
            drop.update(range(s, e))
        self.kept = [p for p in self.kept if p not in drop]

    def to_physical(self, p: int) -> int:
        return self.kept.index(p)

    @property
    def used_tokens(self) -> int:
        return len(self.kept)

    @property
    def pages(self) -> int:
        return -(-len(self.kept) // self.page_size)

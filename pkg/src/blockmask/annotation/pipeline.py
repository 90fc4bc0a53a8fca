"""Annotation pipeline: split, score boundaries, segment, refine mementos.

Stages for one raw trace:
  1. structure-aware sentence splitting
  2. windowed boundary scoring through a chat client
  3. partition optimization over the scored boundaries
  4. per-block compressor -> judge refinement loop (at most two rounds)

The output is an annotated trace (marker-framed token arrays plus parallel
text fields), one memento record per block, and per-trace statistics. A
failing trace produces an error record; the corpus run continues.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from ..segmentation import (
    BoundaryScores,
    Sentence,
    SplitterConfig,
    optimize,
    split_sentences,
)
from ..trace import AnnotatedTrace, Segment, TraceToken, serialize_trace_record
from .clients import ChatClient, ClientError

logger = logging.getLogger(__name__)

DEFAULT_TAU = 8.0
DEFAULT_MAX_ROUNDS = 2
DEFAULT_WINDOW = 12
DEFAULT_OVERLAP = 2

STAGE_SCORE = "score"
STAGE_COMPRESS = "compress"
STAGE_JUDGE = "judge"

_DIMENSION_MAXIMA = {
    "formulas": 3.0,
    "values": 2.0,
    "methods": 2.0,
    "validation": 1.0,
    "no_hallucination": 1.0,
    "structure": 1.0,
}


class PipelineError(Exception):
    pass


class BoundaryScoringError(PipelineError):
    def __init__(self, window_index: int, reason: str):
        super().__init__(f"boundary scoring failed in window {window_index}: {reason}")
        self.window_index = window_index


def load_prompt(name: str) -> str:
    return resources.files("blockmask.annotation").joinpath(f"prompts/{name}.txt").read_text(
        encoding="utf-8"
    )


def hash_token_ids(text: str) -> list[int]:
    """Deterministic whitespace tokenization to opaque ids.

    Ids are >= 1000 so they stay clear of small marker-id assignments; nothing
    ever decodes them, they only need to be stable and non-negative.
    """
    ids = []
    for word in text.split():
        digest = hashlib.blake2s(word.encode("utf-8"), digest_size=4).digest()
        ids.append(1000 + int.from_bytes(digest, "big") % (2**31 - 1000))
    return ids


@dataclass
class PipelineClients:
    scorer: ChatClient
    compressor: ChatClient
    judge: ChatClient

    @classmethod
    def single(cls, client: ChatClient) -> "PipelineClients":
        return cls(client, client, client)


@dataclass
class PipelineParams:
    window: int = DEFAULT_WINDOW
    overlap: int = DEFAULT_OVERLAP
    tau: float = DEFAULT_TAU
    max_rounds: int = DEFAULT_MAX_ROUNDS
    lam: float = 0.5
    min_block_tokens: int = 200
    parse_retries: int = 3
    concurrency: int = 1
    splitter: SplitterConfig = field(default_factory=SplitterConfig)
    tokenize: Callable[[str], list[int]] = hash_token_ids


@dataclass(frozen=True)
class JudgeVerdict:
    """Score in [0, 10] with actionable feedback; breakdown optional."""

    score: float
    feedback: str = ""
    dimensions: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 10.0):
            raise ValueError(f"judge score {self.score} outside [0, 10]")
        if self.dimensions is not None and self.score > sum(_DIMENSION_MAXIMA.values()):
            raise ValueError("score exceeds dimension maxima")


@dataclass
class MementoRecord:
    problem_id: str
    block_index: int
    block_text: str
    memento_text: str
    rounds_used: int
    final_score: float
    accepted: bool
    compression_ratio: float
    domain: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, ensure_ascii=False, separators=(",", ":"))


class CallCounter:
    """Per-stage call indices for one trace, shared across pipeline stages so
    scripted mock responses line up with the actual call order."""

    def __init__(self) -> None:
        self._counts: dict[str, int] = {}

    def next(self, stage: str) -> int:
        value = self._counts.get(stage, 0)
        self._counts[stage] = value + 1
        return value


_JSON_RE = re.compile(r"\{.*\}", re.DOTALL)


def _extract_json(text: str) -> dict:
    text = text.strip()
    if text.startswith("```"):
        text = re.sub(r"^```[a-zA-Z]*\n?|\n?```$", "", text).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        m = _JSON_RE.search(text)
        if m:
            return json.loads(m.group(0))
        raise


def score_boundaries(
    sentences: Sequence[Sentence],
    client: ChatClient,
    window: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
    trace_id: str = "",
    parse_retries: int = 3,
) -> BoundaryScores:
    """Score every inter-sentence boundary in overlapping sentence windows.

    Consecutive windows share ``overlap`` boundaries; a boundary scored by
    several windows gets the mean. Out-of-range scores clamp to [0, 3].
    """
    if not window > overlap >= 0:
        raise ValueError(f"need window > overlap >= 0, got W={window} O={overlap}")
    n = len(sentences)
    if n <= 1:
        return BoundaryScores(())

    step = max(1, window - 1 - overlap)
    starts = [0]
    while starts[-1] + window < n:
        starts.append(min(starts[-1] + step, n - window))

    system = load_prompt("boundary_scorer")
    sums = [0.0] * (n - 1)
    counts = [0] * (n - 1)
    call_index = 0

    for window_index, s in enumerate(starts):
        chunk = sentences[s : min(s + window, n)]
        n_bounds = len(chunk) - 1
        if n_bounds <= 0:
            continue
        numbered = "\n".join(f"[{s + i}] {sent.text}" for i, sent in enumerate(chunk))
        user = (
            f"Score the {n_bounds} boundaries between these consecutive sentences.\n\n"
            f"{numbered}\n\n"
            'Output JSON: {"scores": [...]} with one score per boundary.'
        )

        values: list[float] | None = None
        last_reason = ""
        for _ in range(parse_retries):
            try:
                text = client.complete(
                    system, user, stage=STAGE_SCORE, trace_id=trace_id, call_index=call_index
                )
            finally:
                call_index += 1
            try:
                payload = _extract_json(text)
                raw = payload["scores"]
                if not isinstance(raw, list) or len(raw) != n_bounds:
                    raise ValueError(f"expected {n_bounds} scores, got {raw!r}")
                values = [float(v) for v in raw]
                break
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
                last_reason = str(e)
        if values is None:
            raise BoundaryScoringError(window_index, last_reason)

        for i, v in enumerate(values):
            if not (0.0 <= v <= 3.0):
                logger.warning("clamping boundary score %s into [0, 3]", v)
                v = min(3.0, max(0.0, v))
            sums[s + i] += v
            counts[s + i] += 1

    if any(c == 0 for c in counts):
        raise BoundaryScoringError(-1, "window schedule left a boundary unscored")
    return BoundaryScores(tuple(s / c for s, c in zip(sums, counts)))


def _parse_verdict(text: str) -> JudgeVerdict | None:
    try:
        payload = _extract_json(text)
        score = float(payload["score"])
    except (ValueError, KeyError, TypeError, json.JSONDecodeError):
        return None
    score = min(10.0, max(0.0, score))
    feedback = str(payload.get("feedback", ""))
    dims = payload.get("dimensions")
    dimensions = None
    if isinstance(dims, dict):
        dimensions = {}
        for key, cap in _DIMENSION_MAXIMA.items():
            if key in dims:
                try:
                    dimensions[key] = min(cap, max(0.0, float(dims[key])))
                except (TypeError, ValueError):
                    pass
    return JudgeVerdict(score=score, feedback=feedback, dimensions=dimensions or None)


def refine_memento(
    block_text: str,
    prior_blocks_context: str,
    compressor: ChatClient,
    judge: ChatClient,
    tau: float = DEFAULT_TAU,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    trace_id: str = "",
    block_index: int = 0,
    count_tokens: Callable[[str], int] = lambda t: len(t.split()),
    calls: CallCounter | None = None,
) -> MementoRecord:
    """Compressor -> judge loop, stopping at the acceptance threshold.

    Runs at most ``max_rounds`` rounds (one compressor and one judge call
    each). If no round reaches ``tau`` the best-scoring memento is kept and
    the record is flagged unaccepted. An unparsable judge reply counts as a
    failed round with score 0.
    """
    if not block_text.strip():
        raise PipelineError("cannot summarize an empty block")
    calls = calls or CallCounter()
    compressor_system = load_prompt("compressor")
    judge_system = load_prompt("judge")

    rounds: list[tuple[str, float]] = []
    feedback = ""
    for round_no in range(1, max_rounds + 1):
        user = f"Context from earlier blocks:\n{prior_blocks_context or '(none)'}\n\n"
        user += f"BLOCK TO COMPRESS:\n{block_text}\n\n"
        if feedback:
            user += f"Previous summary:\n{rounds[-1][0]}\n\nJudge feedback to address:\n{feedback}\n\n"
        user += "Output only the state summary text."
        memento = compressor.complete(
            compressor_system,
            user,
            stage=STAGE_COMPRESS,
            trace_id=trace_id,
            call_index=calls.next(STAGE_COMPRESS),
        ).strip()

        judge_user = (
            f"ORIGINAL BLOCK:\n{block_text}\n\nSUMMARY:\n{memento}\n\n"
            'Output JSON: {"score": 0-10, "feedback": "...", "dimensions": {...}}.'
        )
        verdict_text = judge.complete(
            judge_system,
            judge_user,
            stage=STAGE_JUDGE,
            trace_id=trace_id,
            call_index=calls.next(STAGE_JUDGE),
        )
        verdict = _parse_verdict(verdict_text)
        if verdict is None:
            logger.warning("unparsable judge reply for %s block %d round %d", trace_id, block_index, round_no)
            rounds.append((memento, 0.0))
            feedback = ""
            continue
        rounds.append((memento, verdict.score))
        if verdict.score >= tau:
            break
        feedback = verdict.feedback

    best_text, best_score = max(rounds, key=lambda r: r[1])
    if rounds[-1][1] >= tau:
        best_text, best_score = rounds[-1]
    block_tokens = max(1, count_tokens(block_text))
    return MementoRecord(
        problem_id=trace_id,
        block_index=block_index,
        block_text=block_text,
        memento_text=best_text,
        rounds_used=len(rounds),
        final_score=best_score,
        accepted=best_score >= tau,
        compression_ratio=count_tokens(best_text) / block_tokens,
        domain="",
    )


@dataclass
class TraceStats:
    problem_id: str
    domain: str
    n_blocks: int
    block_tokens: list[int]
    memento_tokens: list[int]
    block_chars: list[int]
    memento_chars: list[int]
    compression_ratios: list[float]
    rounds_used: list[int]
    accepted: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def run_pipeline(
    raw: dict,
    clients: PipelineClients,
    params: PipelineParams | None = None,
) -> tuple[AnnotatedTrace, list[MementoRecord], TraceStats]:
    """Annotate one raw record {problem_id, problem, cot, answer, domain}."""
    params = params or PipelineParams()
    problem_id = str(raw["problem_id"])
    domain = str(raw.get("domain", ""))
    cot = raw["cot"]
    if not str(cot).strip():
        raise PipelineError(f"trace {problem_id} has an empty cot")

    sentences = split_sentences(cot, params.splitter)
    scores = score_boundaries(
        sentences,
        clients.scorer,
        window=params.window,
        overlap=params.overlap,
        trace_id=problem_id,
        parse_retries=params.parse_retries,
    )
    partition = optimize(
        [s.token_count for s in sentences],
        scores,
        min_block_tokens=params.min_block_tokens,
        lam=params.lam,
    )

    bounds = (0,) + partition.cut_indices + (len(sentences),)
    block_texts = []
    for a, b in zip(bounds, bounds[1:]):
        start = sentences[a].span[0]
        end = sentences[b - 1].span[1]
        block_texts.append(cot[start:end].strip())

    records: list[MementoRecord] = []
    segments: list[Segment] = []
    count = params.splitter.count_tokens
    calls = CallCounter()
    for idx, block_text in enumerate(block_texts):
        prior = "\n".join(r.memento_text for r in records)
        record = refine_memento(
            block_text,
            prior,
            clients.compressor,
            clients.judge,
            tau=params.tau,
            max_rounds=params.max_rounds,
            trace_id=problem_id,
            block_index=idx,
            count_tokens=count,
            calls=calls,
        )
        record.domain = domain
        records.append(record)
        segments.append(
            Segment(
                tuple(TraceToken(i) for i in params.tokenize(block_text)),
                tuple(TraceToken(i) for i in params.tokenize(record.memento_text)),
            )
        )

    trace = AnnotatedTrace(
        problem_id=problem_id,
        prompt_tokens=tuple(TraceToken(i) for i in params.tokenize(str(raw.get("problem", "")))),
        segments=tuple(segments),
        answer_tokens=tuple(TraceToken(i) for i in params.tokenize(str(raw.get("answer", "")))),
        metadata={"domain": domain, "source": str(raw.get("source", ""))},
        extra={
            "problem_text": str(raw.get("problem", "")),
            "answer_text": str(raw.get("answer", "")),
            "block_texts": block_texts,
            "summary_texts": [r.memento_text for r in records],
        },
    )
    stats = TraceStats(
        problem_id=problem_id,
        domain=domain,
        n_blocks=len(block_texts),
        block_tokens=[count(t) for t in block_texts],
        memento_tokens=[count(r.memento_text) for r in records],
        block_chars=[len(t) for t in block_texts],
        memento_chars=[len(r.memento_text) for r in records],
        compression_ratios=[r.compression_ratio for r in records],
        rounds_used=[r.rounds_used for r in records],
        accepted=sum(1 for r in records if r.accepted),
    )
    return trace, records, stats


def run_corpus(
    input_path: str | Path,
    output_dir: str | Path,
    clients: PipelineClients,
    params: PipelineParams | None = None,
) -> dict:
    """Annotate a corpus JSONL; failed traces become error records.

    Writes traces.jsonl, mementos.jsonl, errors.jsonl and stats.json into
    ``output_dir``; outputs follow input order regardless of concurrency.
    """
    params = params or PipelineParams()
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    with open(input_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))

    def work(raw: dict):
        try:
            return ("ok", run_pipeline(raw, clients, params))
        except (PipelineError, ClientError, KeyError, ValueError) as e:
            return ("error", {"problem_id": str(raw.get("problem_id", "?")), "error": str(e)})

    if params.concurrency > 1:
        with ThreadPoolExecutor(max_workers=params.concurrency) as pool:
            results = list(pool.map(work, rows))
    else:
        results = [work(r) for r in rows]

    traces_f = open(out / "traces.jsonl", "w", encoding="utf-8")
    mementos_f = open(out / "mementos.jsonl", "w", encoding="utf-8")
    errors_f = open(out / "errors.jsonl", "w", encoding="utf-8")
    per_trace = []
    n_errors = 0
    try:
        for status, payload in results:
            if status == "error":
                n_errors += 1
                errors_f.write(json.dumps(payload, ensure_ascii=False) + "\n")
                continue
            trace, records, stats = payload
            traces_f.write(serialize_trace_record(trace) + "\n")
            for record in records:
                mementos_f.write(record.to_json() + "\n")
            per_trace.append(stats.to_dict())
    finally:
        traces_f.close()
        mementos_f.close()
        errors_f.close()

    summary = {
        "n_traces": len(per_trace),
        "n_errors": n_errors,
        "per_trace": per_trace,
    }
    if per_trace:
        total_block = sum(sum(t["block_tokens"]) for t in per_trace)
        total_memento = sum(sum(t["memento_tokens"]) for t in per_trace)
        summary["mean_blocks_per_trace"] = sum(t["n_blocks"] for t in per_trace) / len(per_trace)
        summary["mean_block_tokens"] = total_block / max(1, sum(t["n_blocks"] for t in per_trace))
        summary["mean_memento_tokens"] = total_memento / max(1, sum(t["n_blocks"] for t in per_trace))
        summary["trace_compression"] = total_block / total_memento if total_memento else 0.0
    (out / "stats.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return summary


def quantile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation quantile over sorted order statistics."""
    if not values:
        raise ValueError("empty values")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q outside [0, 1]")
    data = sorted(values)
    h = (len(data) - 1) * q
    lo = int(h)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (data[hi] - data[lo]) * (h - lo)


def corpus_stats(per_trace: Sequence[dict]) -> dict:
    """Distribution report grouped by domain: medians of blocks/sample, block
    and summary sizes in characters, compression ratio; quartiles plus CDF
    deciles of the compression ratio."""
    if not per_trace:
        raise PipelineError("empty corpus")

    def describe(traces: Sequence[dict]) -> dict:
        blocks = [t["n_blocks"] for t in traces]
        block_chars = [c for t in traces for c in t["block_chars"]]
        memento_chars = [c for t in traces for c in t["memento_chars"]]
        ratios = [r for t in traces for r in t["compression_ratios"]]
        report = {
            "n_traces": len(traces),
            "median_blocks_per_sample": quantile(blocks, 0.5),
            "median_block_chars": quantile(block_chars, 0.5) if block_chars else 0.0,
            "median_summary_chars": quantile(memento_chars, 0.5) if memento_chars else 0.0,
            "median_compression_ratio": quantile(ratios, 0.5) if ratios else 0.0,
        }
        if ratios:
            report["ratio_quartiles"] = [quantile(ratios, q) for q in (0.25, 0.5, 0.75)]
            report["ratio_cdf_deciles"] = [quantile(ratios, i / 10) for i in range(11)]
        if block_chars:
            report["block_chars_quartiles"] = [quantile(block_chars, q) for q in (0.25, 0.5, 0.75)]
        return report

    domains: dict[str, list[dict]] = {}
    for t in per_trace:
        domains.setdefault(t.get("domain", ""), []).append(t)
    report = {"all": describe(per_trace)}
    for domain, traces in sorted(domains.items()):
        report[domain or "unknown"] = describe(traces)
    return report

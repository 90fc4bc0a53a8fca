"""Structure-aware sentence splitting and optimal boundary selection.

Splitting protects fenced code and display math as atomic units, avoids
breaking inside parentheses, inline math or after known abbreviations, then
runs merge passes (trailing colons attach forward, continuation words attach
backward, short fragments and consecutive math-only expressions consolidate).

The partition optimizer maximizes

    mean(scores at cuts) - lambda * std(block_lengths) / mean(block_lengths)

over every cut set and block count, subject to a per-block token minimum.
For a fixed block count K and fixed total length, the objective is monotone
increasing in the summed cut scores and decreasing in the sum of squared
block lengths, so a dynamic program that keeps the Pareto frontier of
(score_sum, sq_length_sum) per (sentence, K) state is exact. Beyond
``exact_threshold`` sentences the frontier is additionally beam-capped, which
makes the search a documented heuristic.
"""

from __future__ import annotations

import logging
import math
import re
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Sequence

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.5
DEFAULT_MIN_BLOCK_TOKENS = 200
DEFAULT_EXACT_THRESHOLD = 200

DEFAULT_CONTINUATION_WORDS = ("Therefore", "Thus", "So", "Hence")
DEFAULT_ABBREVIATIONS = (
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "al.", "approx.", "resp.",
    "Dr.", "Mr.", "Mrs.", "Ms.", "Prof.", "St.",
    "Fig.", "Eq.", "Eqs.", "Sec.", "Ch.", "No.", "p.", "pp.",
)


def whitespace_tokens(text: str) -> int:
    """Default token counter: whitespace-delimited words."""
    return len(text.split())


@dataclass(frozen=True)
class Sentence:
    text: str
    token_count: int
    span: tuple[int, int]
    atomic: bool = False


@dataclass
class SplitterConfig:
    abbreviations: tuple[str, ...] = DEFAULT_ABBREVIATIONS
    continuation_words: tuple[str, ...] = DEFAULT_CONTINUATION_WORDS
    min_fragment_tokens: int = 5
    count_tokens: Callable[[str], int] = whitespace_tokens


_FENCE_RE = re.compile(r"```.*?```|~~~.*?~~~", re.DOTALL)
_DISPLAY_MATH_RE = re.compile(r"\$\$.*?\$\$|\\\[.*?\\\]", re.DOTALL)
_MATHY_RE = re.compile(r"[=<>±∑∫√^_\\]|\$[^$]+\$")


def _protected_regions(text: str) -> list[tuple[int, int]]:
    regions = [m.span() for m in _FENCE_RE.finditer(text)]
    for m in _DISPLAY_MATH_RE.finditer(text):
        s, e = m.span()
        if not any(rs <= s < re_ for rs, re_ in regions):
            regions.append((s, e))
    return sorted(regions)


def _is_math_only(text: str) -> bool:
    """Mostly symbols/equations rather than prose."""
    stripped = text.strip()
    if not stripped:
        return False
    if not _MATHY_RE.search(stripped):
        return False
    words = re.findall(r"[A-Za-z]{3,}", stripped)
    return len(words) <= 2


def _ends_with_abbreviation(chunk: str, abbreviations: Sequence[str]) -> bool:
    words = chunk.rstrip().split()
    if not words:
        return False
    return words[-1].lstrip("([{\"'") in abbreviations


def _split_plain(text: str, offset: int, config: SplitterConfig) -> list[tuple[int, int]]:
    """Candidate sentence spans (relative to the full source) of a plain-text
    stretch: break after . ! ? followed by whitespace, or at blank lines,
    skipping breaks inside parentheses/brackets or inline math."""
    spans: list[tuple[int, int]] = []
    start = 0
    depth = 0
    in_math = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth = max(0, depth - 1)
        elif ch == "$":
            in_math = not in_math
        elif ch == "\n" and text[i : i + 2] == "\n\n":
            if text[start:i].strip():
                spans.append((start, i))
            start = i
        elif ch in ".!?" and depth == 0 and not in_math:
            nxt = text[i + 1] if i + 1 < n else " "
            if nxt.isspace() and not _ends_with_abbreviation(text[: i + 1], config.abbreviations):
                spans.append((start, i + 1))
                start = i + 1
        i += 1
    if text[start:].strip():
        spans.append((start, n))
    return [(s + offset, e + offset) for s, e in spans if text[s:e].strip()]


def split_sentences(text: str, config: SplitterConfig | None = None) -> list[Sentence]:
    """Split a reasoning trace into atomic sentences.

    Returned spans tile the source in order: each sentence's interval runs to
    the start of the next (trailing whitespace attaches left), the first
    starts at 0 and the last ends at len(text).
    """
    config = config or SplitterConfig()
    if not text.strip():
        return []

    protected = _protected_regions(text)
    pieces: list[tuple[int, int, bool]] = []  # (start, end, atomic)
    cursor = 0
    for ps, pe in protected:
        for s, e in _split_plain(text[cursor:ps], cursor, config):
            pieces.append((s, e, False))
        pieces.append((ps, pe, True))
        cursor = pe
    for s, e in _split_plain(text[cursor:], cursor, config):
        pieces.append((s, e, False))
    if not pieces:
        pieces = [(0, len(text), False)]

    merged = _merge_passes(text, pieces, config)
    return _tile(text, merged, config)


def _merge_passes(
    text: str, pieces: list[tuple[int, int, bool]], config: SplitterConfig
) -> list[tuple[int, int, bool]]:
    def body(piece):
        return text[piece[0] : piece[1]].strip()

    def join(a, b):
        return (a[0], b[1], a[2] or b[2])

    # Trailing colon attaches to the next sentence.
    out: list[tuple[int, int, bool]] = []
    i = 0
    while i < len(pieces):
        piece = pieces[i]
        while (
            not piece[2]
            and body(piece).endswith(":")
            and i + 1 < len(pieces)
            and not pieces[i + 1][2]
        ):
            piece = join(piece, pieces[i + 1])
            i += 1
        out.append(piece)
        i += 1
    pieces = out

    # Continuation words merge with the preceding sentence.
    out = []
    for piece in pieces:
        first_word = body(piece).split(None, 1)[0].rstrip(",") if body(piece) else ""
        if (
            out
            and not piece[2]
            and not out[-1][2]
            and first_word in config.continuation_words
        ):
            out[-1] = join(out[-1], piece)
        else:
            out.append(piece)
    pieces = out

    # Consecutive math-only expressions consolidate.
    out = []
    for piece in pieces:
        if (
            out
            and not piece[2]
            and not out[-1][2]
            and _is_math_only(body(piece))
            and _is_math_only(body(out[-1]))
        ):
            out[-1] = join(out[-1], piece)
        else:
            out.append(piece)
    pieces = out

    # Short fragments merge into a non-atomic neighbor (previous preferred).
    out = []
    for piece in pieces:
        if (
            out
            and not piece[2]
            and not out[-1][2]
            and config.count_tokens(body(piece)) < config.min_fragment_tokens
        ):
            out[-1] = join(out[-1], piece)
        else:
            out.append(piece)
    merged = out
    out = []
    for piece in merged:
        if (
            out
            and not out[-1][2]
            and not piece[2]
            and config.count_tokens(body(out[-1])) < config.min_fragment_tokens
        ):
            out[-1] = join(out[-1], piece)
        else:
            out.append(piece)
    return out


def _tile(
    text: str, pieces: list[tuple[int, int, bool]], config: SplitterConfig
) -> list[Sentence]:
    sentences = []
    for idx, (s, e, atomic) in enumerate(pieces):
        tile_start = 0 if idx == 0 else pieces[idx - 1][1]
        tile_end = len(text) if idx == len(pieces) - 1 else e
        raw = text[s:e].strip()
        sentences.append(
            Sentence(
                text=raw,
                token_count=max(1, config.count_tokens(raw)),
                span=(tile_start, tile_end),
                atomic=atomic,
            )
        )
    return sentences


@dataclass(frozen=True)
class BoundaryScores:
    """Scores for the n-1 boundaries between n sentences, each in [0, 3].
    ``scores[j]`` rates the boundary between sentences j and j+1."""

    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        for s in self.scores:
            if not (0.0 <= s <= 3.0):
                raise ValueError(f"boundary score {s} outside [0, 3]")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class Partition:
    """Cut indices (each cut c splits sentences [0,c) / [c,n)), block token
    lengths, and whether the minimum-size constraint was waived by the K=1
    fallback."""

    cut_indices: tuple[int, ...]
    block_lengths: tuple[int, ...]
    fallback: bool = False

    @property
    def block_count(self) -> int:
        return len(self.block_lengths)


def objective(partition: Partition, scores: BoundaryScores, lam: float = DEFAULT_LAMBDA) -> float:
    """Mean cut score minus lambda times the coefficient of variation of
    block lengths (population standard deviation). Zero for K=1."""
    k = partition.block_count
    if k <= 1:
        return 0.0
    score_sum = sum(scores.scores[c - 1] for c in partition.cut_indices)
    lengths = partition.block_lengths
    mean = sum(lengths) / k
    if mean == 0:
        return score_sum / k
    var = sum((l - mean) ** 2 for l in lengths) / k
    return score_sum / k - lam * math.sqrt(var) / mean


def _objective_from_sums(score_sum: float, sq_sum: int, k: int, total: int, lam: float) -> float:
    if k <= 1:
        return 0.0
    if total == 0:
        return score_sum / k
    # cv = sqrt(K * sum(l^2) - total^2) / total, via population variance
    disc = max(0.0, k * sq_sum - total * total)
    return score_sum / k - lam * math.sqrt(disc) / total


@dataclass
class _Entry:
    score_sum: float
    sq_sum: int
    cuts: tuple[int, ...]


class _FrontierOverflow(Exception):
    """Exact search would be too expensive; retry with a capped frontier."""


#: Exact frontiers beyond this trip the beam fallback. For n <= 12 a state's
#: frontier is bounded by C(11, 5) = 462 cut sets, so exactness there is
#: never affected.
EXACT_FRONTIER_LIMIT = 512


def optimize(
    lengths: Sequence[int],
    scores: BoundaryScores,
    min_block_tokens: int = DEFAULT_MIN_BLOCK_TOKENS,
    lam: float = DEFAULT_LAMBDA,
    exact_threshold: int = DEFAULT_EXACT_THRESHOLD,
    beam_width: int = 64,
) -> Partition:
    """Select the cut set maximizing the segmentation objective.

    Ties break toward fewer blocks, then the lexicographically smallest cut
    set. If even the whole trace undershoots the block minimum, the single
    K=1 block is returned with ``fallback=True``.

    The search is exact up to ``exact_threshold`` sentences as long as the
    Pareto frontiers stay small (they do for rubric-style scores); if a
    frontier overflows, or beyond the threshold, the frontier is beam-capped
    and the search becomes a documented heuristic.
    """
    n = len(lengths)
    if n == 0:
        raise ValueError("need at least one sentence")
    if len(scores) != n - 1:
        raise ValueError(f"expected {n - 1} boundary scores, got {len(scores)}")
    total = sum(lengths)
    if total < min_block_tokens:
        return Partition((), (total,), fallback=True)

    if n <= exact_threshold:
        try:
            return _search(lengths, scores, min_block_tokens, lam, total, beam=None)
        except _FrontierOverflow:
            logger.warning(
                "exact partition frontiers overflowed at n=%d; using beam width %d",
                n,
                beam_width,
            )
    return _search(lengths, scores, min_block_tokens, lam, total, beam=beam_width)


def _search(
    lengths: Sequence[int],
    scores: BoundaryScores,
    min_block_tokens: int,
    lam: float,
    total: int,
    beam: int | None,
) -> Partition:
    n = len(lengths)
    prefix = [0] * (n + 1)
    for i, l in enumerate(lengths):
        prefix[i + 1] = prefix[i] + l
    max_k = n if min_block_tokens <= 0 else min(n, total // min_block_tokens)

    # prev[i]: Pareto-nondominated (score_sum, sq_sum) states covering
    # sentences [0, i) with k-1 blocks.
    prev: list[list[_Entry]] = [[] for _ in range(n + 1)]
    prev[0] = [_Entry(0.0, 0, ())]
    best: tuple[float, int, tuple[int, ...], tuple[int, ...]] | None = None

    for k in range(1, max_k + 1):
        cur: list[list[_Entry]] = [[] for _ in range(n + 1)]
        for j in range(k, n + 1):
            # Block [i, j) must reach the minimum: prefix[i] <= prefix[j] - min.
            i_hi = bisect_right(prefix, prefix[j] - min_block_tokens, 0, j) - 1
            candidates: list[_Entry] = []
            for i in range(k - 1, i_hi + 1):
                if not prev[i]:
                    continue
                length = prefix[j] - prefix[i]
                cut_score = scores.scores[i - 1] if i > 0 else 0.0
                for e in prev[i]:
                    candidates.append(
                        _Entry(
                            e.score_sum + cut_score,
                            e.sq_sum + length * length,
                            e.cuts + ((i,) if i > 0 else ()),
                        )
                    )
            cur[j] = _pareto(candidates, beam)

        for e in cur[n]:
            obj = _objective_from_sums(e.score_sum, e.sq_sum, k, total, lam)
            if best is None or _better(obj, k, e.cuts, best):
                best = (obj, k, e.cuts, _lengths_from_cuts(lengths, e.cuts))
        prev = cur

    if best is None:
        return Partition((), (total,), fallback=True)
    _, _, cuts, block_lengths = best
    return Partition(cuts, block_lengths)


def _better(obj: float, k: int, cuts: tuple[int, ...], best) -> bool:
    b_obj, b_k, b_cuts, _ = best
    if obj != b_obj:
        return obj > b_obj
    if k != b_k:
        return k < b_k
    return cuts < b_cuts


def _lengths_from_cuts(lengths: Sequence[int], cuts: tuple[int, ...]) -> tuple[int, ...]:
    bounds = (0,) + cuts + (len(lengths),)
    return tuple(sum(lengths[a:b]) for a, b in zip(bounds, bounds[1:]))


def _pareto(entries: list[_Entry], beam: int | None) -> list[_Entry]:
    """Keep entries not dominated in (score_sum max, sq_sum min); on exact
    ties keep the lexicographically smallest cut set."""
    if not entries:
        return []
    entries.sort(key=lambda e: (-e.score_sum, e.sq_sum, e.cuts))
    kept: list[_Entry] = []
    best_sq: int | None = None
    for e in entries:
        if best_sq is None or e.sq_sum < best_sq:
            kept.append(e)
            best_sq = e.sq_sum
    if beam is None:
        if len(kept) > EXACT_FRONTIER_LIMIT:
            raise _FrontierOverflow
    elif len(kept) > beam:
        step = (len(kept) - 1) / (beam - 1)
        kept = [kept[round(i * step)] for i in range(beam)]
    return kept


def brute_force_optimize(
    lengths: Sequence[int],
    scores: BoundaryScores,
    min_block_tokens: int = DEFAULT_MIN_BLOCK_TOKENS,
    lam: float = DEFAULT_LAMBDA,
) -> tuple[float, Partition]:
    """Exhaustive search over all 2^(n-1) cut subsets; test oracle for small n."""
    n = len(lengths)
    best_obj = None
    best_partition = None
    for mask in range(1 << (n - 1)):
        cuts = tuple(i + 1 for i in range(n - 1) if mask & (1 << i))
        block_lengths = _lengths_from_cuts(lengths, cuts)
        if any(l < min_block_tokens for l in block_lengths):
            continue
        p = Partition(cuts, block_lengths)
        obj = objective(p, scores, lam)
        if (
            best_obj is None
            or obj > best_obj
            or (obj == best_obj and (p.block_count, p.cut_indices) < (best_partition.block_count, best_partition.cut_indices))
        ):
            best_obj, best_partition = obj, p
    if best_partition is None:
        return 0.0, Partition((), (sum(lengths),), fallback=True)
    return best_obj, best_partition

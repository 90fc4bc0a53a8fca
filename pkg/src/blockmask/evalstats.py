"""Evaluation statistics over per-problem generation outcomes.

Inputs are pre-judged (answer, correct) pairs, one list per problem; answer
extraction and equivalence checking happen upstream. Answers are compared by
exact string match after whitespace normalization.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


class EvalStatsError(Exception):
    pass


@dataclass(frozen=True)
class Generation:
    answer: str
    correct: bool


class RunMatrix:
    """Ordered per-problem generation outcomes."""

    def __init__(self, problems: dict[str, list[Generation]]):
        if not problems:
            raise EvalStatsError("matrix has no problems")
        for pid, gens in problems.items():
            if not gens:
                raise EvalStatsError(f"problem {pid!r} has no generations")
        self.problems = problems

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "RunMatrix":
        problems: dict[str, list[Generation]] = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                problems[str(row["problem_id"])] = [
                    Generation(str(g["answer"]), bool(g["correct"]))
                    for g in row["generations"]
                ]
        return cls(problems)

    @property
    def min_generations(self) -> int:
        return min(len(g) for g in self.problems.values())

    def solved_set(self) -> set[str]:
        return {pid for pid, gens in self.problems.items() if any(g.correct for g in gens)}


def _normalize(answer: str) -> str:
    return " ".join(answer.split())


def pass_at_1(matrix: RunMatrix) -> tuple[float, float]:
    """(percentage, standard error): per-problem correct fraction averaged
    across problems; SE is the standard error of per-problem means."""
    fractions = [
        sum(g.correct for g in gens) / len(gens) for gens in matrix.problems.values()
    ]
    n = len(fractions)
    mean = sum(fractions) / n
    if n > 1:
        var = sum((f - mean) ** 2 for f in fractions) / (n - 1)
        se = math.sqrt(var / n)
    else:
        se = 0.0
    return mean * 100.0, se * 100.0


def pass_at_k_coverage(matrix: RunMatrix, k: int | None = None) -> float:
    """Percentage of problems with at least one correct among the first k
    generations; k defaults to the full sample count."""
    if k is None:
        k = matrix.min_generations
    if k < 1:
        raise EvalStatsError(f"k must be >= 1, got {k}")
    if k > matrix.min_generations:
        raise EvalStatsError(
            f"k={k} exceeds the {matrix.min_generations} generations available"
        )
    covered = sum(
        1 for gens in matrix.problems.values() if any(g.correct for g in gens[:k])
    )
    return covered / len(matrix.problems) * 100.0


def maj_at_k(matrix: RunMatrix, k: int, seed: int = 0) -> float:
    """Majority-vote accuracy over the first k generations per problem.

    Ties between modal answers break uniformly at random (seeded). The picked
    answer counts as correct iff its generations are marked correct.
    """
    if k < 1:
        raise EvalStatsError(f"k must be >= 1, got {k}")
    if k > matrix.min_generations:
        raise EvalStatsError(
            f"k={k} exceeds the {matrix.min_generations} generations available"
        )
    rng = random.Random(seed)
    correct = 0
    for gens in matrix.problems.values():
        head = gens[:k]
        counts = Counter(_normalize(g.answer) for g in head)
        top = max(counts.values())
        tied = sorted(a for a, c in counts.items() if c == top)
        picked = tied[0] if len(tied) == 1 else rng.choice(tied)
        verdicts = [g.correct for g in head if _normalize(g.answer) == picked]
        if verdicts[0]:
            correct += 1
    return correct / len(matrix.problems) * 100.0


def jaccard_solved(a: RunMatrix, b: RunMatrix) -> tuple[float, float]:
    """(jaccard, retention) between the solved sets of two runs.

    Retention is |A intersect B| / |A|: how much of A's solved set B keeps.
    Empty-over-empty ratios count as 1.0 (nothing was lost).
    """
    if set(a.problems) != set(b.problems):
        raise EvalStatsError("runs cover different problem sets")
    sa, sb = a.solved_set(), b.solved_set()
    union = sa | sb
    inter = sa & sb
    jaccard = len(inter) / len(union) if union else 1.0
    retention = len(inter) / len(sa) if sa else 1.0
    return jaccard, retention


def summary_report(
    matrix: RunMatrix,
    maj_ks: Sequence[int] = (),
    seed: int = 0,
    compare: RunMatrix | None = None,
) -> dict:
    p1, se = pass_at_1(matrix)
    report: dict = {
        "n_problems": len(matrix.problems),
        "n_generations": matrix.min_generations,
        "pass_at_1": p1,
        "pass_at_1_se": se,
        "coverage_pass_at_n": pass_at_k_coverage(matrix),
    }
    for k in maj_ks:
        report[f"maj_at_{k}"] = maj_at_k(matrix, k, seed=seed)
    if compare is not None:
        jac, ret = jaccard_solved(matrix, compare)
        c1, cse = pass_at_1(compare)
        report["compare"] = {
            "pass_at_1": c1,
            "pass_at_1_se": cse,
            "coverage_pass_at_n": pass_at_k_coverage(compare),
            "jaccard_solved": jac,
            "retention": ret,
        }
    return report

"""ROUGE-1/2/L F1 scoring.

Semantics fixed for this repo: clipped n-gram overlap counts, LCS over the
whole summary (no sentence splitting), F1 = 2PR/(P+R) with 0 on empty,
arithmetic mean over examples, lowercase tokenization shared with the
corpus module, no stemming or stopword removal.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .corpus import tokenize
from .errors import ValidationError


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: list[str], reference: list[str], n: int) -> Score:
    """Clipped n-gram overlap precision/recall/F1 for n in {1, 2}."""
    if n not in (1, 2):
        raise ValidationError(f"rouge_n: n must be 1 or 2, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    total_cand = sum(cand.values())
    total_ref = sum(ref.values())
    if total_cand == 0 or total_ref == 0:
        return Score(0.0, 0.0, 0.0)
    overlap = sum(min(count, ref[gram]) for gram, count in cand.items())
    p = overlap / total_cand
    r = overlap / total_ref
    return Score(p, r, _f1(p, r))


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str]) -> Score:
    """Longest-common-subsequence precision/recall/F1."""
    if not candidate or not reference:
        return Score(0.0, 0.0, 0.0)
    lcs = _lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return Score(p, r, _f1(p, r))


@dataclass
class RougeReport:
    per_example: list[dict[str, Score]]
    mean: dict[str, Score]

    def summary(self) -> dict[str, float]:
        return {name: score.f1 for name, score in self.mean.items()}


def score_pair(candidate_text: str, reference_text: str) -> dict[str, Score]:
    cand = tokenize(candidate_text)
    ref = tokenize(reference_text)
    return {
        "rouge1": rouge_n(cand, ref, 1),
        "rouge2": rouge_n(cand, ref, 2),
        "rougeL": rouge_l(cand, ref),
    }


def evaluate_corpus(predictions: list[str], references: list[str]) -> RougeReport:
    """Arithmetic mean of per-example scores over id-aligned text lists."""
    if len(predictions) != len(references):
        raise ValidationError(
            f"evaluate_corpus: {len(predictions)} predictions vs "
            f"{len(references)} references"
        )
    if not references:
        raise ValidationError("evaluate_corpus: empty inputs")
    per_example = [score_pair(c, r) for c, r in zip(predictions, references)]
    n = len(per_example)
    mean = {}
    for key in ("rouge1", "rouge2", "rougeL"):
        mean[key] = Score(
            precision=sum(e[key].precision for e in per_example) / n,
            recall=sum(e[key].recall for e in per_example) / n,
            f1=sum(e[key].f1 for e in per_example) / n,
        )
    return RougeReport(per_example=per_example, mean=mean)

"""Overlap metrics for generated reports: ROUGE-1 and smoothed BLEU."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass

from .textutil import words


@dataclass
class MetricReport:
    rouge1_precision: float
    rouge1_recall: float
    rouge1_f1: float
    bleu: float

    def as_dict(self) -> dict:
        return asdict(self)


def rouge1(candidate: str, reference: str) -> tuple[float, float, float]:
    """Unigram precision, recall, and F1 with per-type clipping."""
    cand = words(candidate)
    ref = words(reference)
    if not cand or not ref:
        warnings.warn("empty candidate or reference after tokenization, scoring 0")
        return (0.0, 0.0, 0.0)
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    overlap = sum(min(n, ref_counts[tok]) for tok, n in cand_counts.items())
    precision = overlap / len(cand)
    recall = overlap / len(ref)
    if precision + recall == 0:
        return (0.0, 0.0, 0.0)
    f1 = 2 * precision * recall / (precision + recall)
    return (precision, recall, f1)


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions up to max_n, with brevity penalty.

    For n >= 2 a zero or undefined precision is smoothed to (m + 1) / (c + 1);
    a zero unigram precision scores 0 outright.
    """
    cand = words(candidate)
    ref = words(reference)
    if not cand or not ref:
        warnings.warn("empty candidate or reference after tokenization, scoring 0")
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_ngrams = _ngram_counts(cand, n)
        ref_ngrams = _ngram_counts(ref, n)
        total = sum(cand_ngrams.values())
        matched = sum(min(count, ref_ngrams[g]) for g, count in cand_ngrams.items())
        if n == 1:
            if matched == 0:
                return 0.0
            precision = matched / total
        elif total == 0 or matched == 0:
            precision = (matched + 1) / (total + 1)
        else:
            precision = matched / total
        log_sum += math.log(precision)
    score = math.exp(log_sum / max_n)
    if len(cand) < len(ref):
        score *= math.exp(1.0 - len(ref) / len(cand))
    return score


def score_pair(candidate: str, reference: str) -> MetricReport:
    p, r, f1 = rouge1(candidate, reference)
    return MetricReport(p, r, f1, bleu(candidate, reference))


def corpus_mean(reports: list[MetricReport]) -> dict:
    """Field-wise mean over a non-empty list of reports."""
    if not reports:
        raise ValueError("cannot average an empty report list")
    n = len(reports)
    return {
        "rouge1_precision": sum(r.rouge1_precision for r in reports) / n,
        "rouge1_recall": sum(r.rouge1_recall for r in reports) / n,
        "rouge1_f1": sum(r.rouge1_f1 for r in reports) / n,
        "bleu": sum(r.bleu for r in reports) / n,
    }

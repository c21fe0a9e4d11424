"""Sentence BLEU-4, distinct-word counts, mAP / rank-k accuracy and their report tables."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .data import RESERVED


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def closest_ref_length(c: int, ref_lengths: Sequence[int]) -> int:
    return min(ref_lengths, key=lambda r: (abs(r - c), r))


def bleu4(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Unsmoothed sentence BLEU-4 with per-reference clipping and the closest-length brevity penalty."""
    if len(candidate) == 0:
        raise ValueError("candidate must be non-empty")
    if not references:
        raise ValueError("need at least one reference")
    log_p = 0.0
    for n in range(1, 5):
        cand = ngram_counts(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= ngram_counts(ref, n)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / 4
    c = len(candidate)
    r = closest_ref_length(c, [len(ref) for ref in references])
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


@dataclass
class RetrievalReport:
    mean_ap: float
    accuracy: dict[int, float]
    ranks: list[int] = field(default_factory=list)

    def check(self) -> None:
        ks = sorted(self.accuracy)
        vals = [self.accuracy[k] for k in ks]
        assert all(0.0 <= v <= 1.0 for v in [self.mean_ap, *vals])
        assert all(a <= b for a, b in zip(vals, vals[1:])), "rank-k accuracy must not decrease in k"
        assert self.mean_ap >= self.accuracy.get(1, 0.0), "mAP must be at least rank-1 accuracy"


def retrieval_metrics(ranks: Sequence[int], ks: Sequence[int] = (1, 2, 3)) -> RetrievalReport:
    """mAP with a single relevant item (AP = 1/k) and rank-k accuracies."""
    ranks = [int(k) for k in ranks]
    if not ranks:
        raise ValueError("need at least one rank")
    if min(ranks) < 1:
        raise ValueError("ranks are 1-based")
    mean_ap = sum(1.0 / k for k in ranks) / len(ranks)
    acc = {k: sum(r <= k for r in ranks) / len(ranks) for k in ks}
    return RetrievalReport(mean_ap, acc, ranks)


@dataclass
class GenerationReport:
    average_bleu: float
    distinct_words: int
    per_item: dict[str, float]


def generation_report(
    generated: Mapping[str, Sequence[str]],
    references: Mapping[str, Sequence[Sequence[str]]],
    vocab=None,
) -> GenerationReport:
    """Average sentence BLEU-4 over items and the number of distinct non-reserved output words."""
    missing = sorted(set(generated) ^ set(references))
    if missing:
        raise KeyError(f"generated and reference ids differ: {missing}")
    if not generated:
        raise ValueError("nothing to score")
    per_item = {}
    for pid in sorted(generated):
        cand = list(generated[pid])
        per_item[pid] = bleu4(cand, references[pid]) if cand else 0.0
    reserved = set(RESERVED)
    words = {w for toks in generated.values() for w in toks if w not in reserved}
    if vocab is not None:
        assert len(words) <= len(vocab)
    return GenerationReport(sum(per_item.values()) / len(per_item), len(words), per_item)


# ---------------------------------------------------------------------------
# tables


def _write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_generation_table(path, reports: Mapping[str, GenerationReport], meteor: Mapping[str, float] | None = None) -> Path:
    meteor = meteor or {}
    rows = [
        (name, f"{r.average_bleu:.4f}", f"{meteor[name]:.4f}" if name in meteor else "n/a", r.distinct_words)
        for name, r in reports.items()
    ]
    header = ("Method", "Average BLEU-4 Score", "Average METEOR Score", "# of words used in the output")
    return _write_table(path, header, rows)


def write_retrieval_table(path, reports: Mapping[str, RetrievalReport]) -> Path:
    rows = []
    for name, r in reports.items():
        r.check()
        rows.append((name, f"{r.mean_ap:.4f}", *(f"{r.accuracy[k]:.4f}" for k in (1, 2, 3))))
    header = ("Method", "mAP", "rank-1 accuracy", "rank-2 accuracy", "rank-3 accuracy")
    return _write_table(path, header, rows)


def write_timing_table(path, rows: Mapping[str, tuple[int, float, float]]) -> Path:
    """rows: method -> (# parameters, mean generation seconds, mean comprehension seconds)."""
    body = [(name, n, f"{g:.4f}", f"{c:.4f}") for name, (n, g, c) in rows.items()]
    header = ("Method", "# of parameters", "Generation time (sec)", "Comprehension time (sec)")
    return _write_table(path, header, body)


def read_table(path) -> list[dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]

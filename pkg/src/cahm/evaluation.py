"""ROUGE-1/2/L with their geometric mean, and JSONL export for external scorers."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .segmentation import word_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, hits: int, cand_total: int, ref_total: int) -> Score:
        p = hits / cand_total if cand_total else 0.0
        r = hits / ref_total if ref_total else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class RougeReport:
    r1: Score
    r2: Score
    rl: Score

    @property
    def geometric_mean_f1(self) -> float:
        prod = self.r1.f1 * self.r2.f1 * self.rl.f1
        return prod ** (1 / 3) if prod > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "rouge1": self.r1.to_dict(),
            "rouge2": self.r2.to_dict(),
            "rougeL": self.rl.to_dict(),
            "geometric_mean_f1": self.geometric_mean_f1,
        }


def _ngram_score(cand: list[str], ref: list[str], n: int) -> Score:
    c = Counter(tuple(cand[i : i + n]) for i in range(len(cand) - n + 1))
    r = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    hits = sum((c & r).values())
    return Score.from_counts(hits, sum(c.values()), sum(r.values()))


def lcs_length(a: list[str], b: list[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: str, reference: str) -> RougeReport:
    """Lowercased, punctuation-stripped word tokens; no stemming or stopword removal."""
    if not candidate.strip() or not reference.strip():
        raise ValueError("rouge needs non-empty candidate and reference")
    cand, ref = word_tokens(candidate), word_tokens(reference)
    lcs = lcs_length(cand, ref)
    return RougeReport(
        _ngram_score(cand, ref, 1),
        _ngram_score(cand, ref, 2),
        Score.from_counts(lcs, len(cand), len(ref)),
    )


def corpus_means(reports: Iterable[RougeReport]) -> dict:
    reports = list(reports)
    if not reports:
        return {}
    n = len(reports)
    mean = lambda xs: sum(xs) / n  # noqa: E731
    return {
        "rouge1_f1": mean(r.r1.f1 for r in reports),
        "rouge2_f1": mean(r.r2.f1 for r in reports),
        "rougeL_f1": mean(r.rl.f1 for r in reports),
        "geometric_mean_f1": mean(r.geometric_mean_f1 for r in reports),
        "count": n,
    }


EXPORT_SCHEMA = {
    "type": "object",
    "required": ["id", "source", "candidate", "reference"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string"},
        "source": {"type": "string"},
        "candidate": {"type": "string"},
        "reference": {"type": ["string", "null"]},
    },
}


def export_rows(pairs: Iterable[tuple[str, str, str, str | None]]) -> tuple[list[dict], list[str]]:
    """Rows of {id, source, candidate, reference}; a missing reference becomes null plus a warning."""
    rows, warnings = [], []
    for doc_id, source, candidate, reference in pairs:
        if reference is None:
            msg = f"{doc_id}: no reference summary"
            logger.warning(msg)
            warnings.append(msg)
        rows.append({"id": doc_id, "source": source, "candidate": candidate, "reference": reference})
    return rows, warnings


def export_for_neural_metrics(pairs, path: str | Path) -> list[str]:
    rows, warnings = export_rows(pairs)
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return warnings

"""Rank-quality metrics and paired significance testing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import special


@dataclass(frozen=True)
class RankedList:
    """Documents in rank order (rank 1 first) with their relevance labels.

    ``relevance`` may hold judged documents that were not retrieved; they
    count against MAP and recall and, with global normalization, NDCG.
    """

    doc_ids: tuple
    relevance: Mapping[str, float]

    def __post_init__(self):
        doc_ids = tuple(self.doc_ids)
        if len(set(doc_ids)) != len(doc_ids):
            raise ValueError("doc_ids in a ranked list must be unique")
        relevance = dict(self.relevance)
        for doc in doc_ids:
            relevance.setdefault(doc, 0.0)
        object.__setattr__(self, "doc_ids", doc_ids)
        object.__setattr__(self, "relevance", relevance)

    def labels(self) -> list:
        return [self.relevance[d] for d in self.doc_ids]

    def num_relevant(self, scope: str = "global") -> int:
        if scope == "list":
            return sum(1 for d in self.doc_ids if self.relevance[d] > 0)
        return sum(1 for v in self.relevance.values() if v > 0)


def sort_by_scores(candidates, scores: Sequence[float], relevance=None) -> RankedList:
    """Order documents by descending score; ties keep their input order.

    ``candidates`` is a :class:`~rankforge.data.CandidateList` (whose labels
    become the relevance map) or a plain sequence of document ids.
    """
    if hasattr(candidates, "candidates"):
        doc_ids = [c.doc_id for c in candidates.candidates]
        if relevance is None:
            relevance = {c.doc_id: float(c.label) for c in candidates.candidates}
    else:
        doc_ids = list(candidates)
    if len(doc_ids) != len(scores):
        raise ValueError(f"{len(doc_ids)} documents but {len(scores)} scores")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return RankedList(tuple(doc_ids[i] for i in order), relevance or {})


def mrr_at_k(rl: RankedList, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    for rank, doc in enumerate(rl.doc_ids[:k], start=1):
        if rl.relevance[doc] > 0:
            return 1.0 / rank
    return 0.0


def _dcg(labels: Sequence[float], k: Optional[int]) -> float:
    total = 0.0
    for rank, y in enumerate(labels[:k] if k is not None else labels, start=1):
        if y > 0:
            total += (2.0**y - 1.0) / math.log2(rank + 1)
    return total


def ndcg_at_k(rl: RankedList, k: Optional[int] = None, normalization: str = "list") -> float:
    """NDCG with gain ``2**y - 1``; ``k=None`` scores the whole list.

    ``normalization="list"`` builds the ideal ranking from the labels of the
    ranked documents themselves; ``"global"`` uses every judged document.
    """
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    if normalization == "list":
        pool = rl.labels()
    elif normalization == "global":
        pool = list(rl.relevance.values())
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    ideal = _dcg(sorted(pool, reverse=True), k)
    if ideal == 0.0:
        return 0.0
    return _dcg(rl.labels(), k) / ideal


def average_precision(rl: RankedList) -> float:
    total_relevant = rl.num_relevant("global")
    if total_relevant == 0:
        return 0.0
    hits = 0
    total = 0.0
    for rank, doc in enumerate(rl.doc_ids, start=1):
        if rl.relevance[doc] > 0:
            hits += 1
            total += hits / rank
    return total / total_relevant


def recall_at_k(rl: RankedList, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    total_relevant = rl.num_relevant("global")
    if total_relevant == 0:
        return 0.0
    found = sum(1 for d in rl.doc_ids[:k] if rl.relevance[d] > 0)
    return found / total_relevant


def parse_metric(name: str) -> tuple[str, Optional[int]]:
    """Split ``"ndcg@10"`` into ``("ndcg", 10)``; bare names have no cutoff."""
    base, _, cutoff = name.lower().partition("@")
    if base not in ("mrr", "ndcg", "map", "recall"):
        raise ValueError(f"unknown metric {name!r}")
    k = int(cutoff) if cutoff else None
    if base in ("mrr", "recall") and k is None:
        raise ValueError(f"metric {name!r} needs a cutoff, e.g. {base}@10")
    if base == "map" and k is not None:
        raise ValueError("map takes no cutoff")
    return base, k


def compute_metric(rl: RankedList, name: str, normalization: str = "list") -> float:
    base, k = parse_metric(name)
    if base == "mrr":
        return mrr_at_k(rl, k)
    if base == "ndcg":
        return ndcg_at_k(rl, k, normalization)
    if base == "map":
        return average_precision(rl)
    return recall_at_k(rl, k)


@dataclass
class MetricReport:
    name: str
    per_query: dict = field(default_factory=dict)

    @property
    def cutoff(self) -> Optional[int]:
        return parse_metric(self.name)[1]

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return float(math.fsum(self.per_query.values()) / len(self.per_query))

    def to_dict(self) -> dict:
        return {"metric": self.name, "mean": self.mean, "per_query": dict(self.per_query)}


def evaluate_rankings(
    rankings: Mapping[str, RankedList],
    metrics: Sequence[str],
    empty_queries: str = "zero",
    normalization: str = "list",
) -> dict:
    """Score every query; returns ``{metric: MetricReport}``.

    Queries without any relevant document score 0 under
    ``empty_queries="zero"`` and are left out under ``"drop"``.
    """
    if empty_queries not in ("zero", "drop"):
        raise ValueError(f"unknown empty-query convention {empty_queries!r}")
    reports = {name: MetricReport(name) for name in metrics}
    for qid, rl in rankings.items():
        if rl.num_relevant("global") == 0 and empty_queries == "drop":
            continue
        for name in metrics:
            reports[name].per_query[qid] = compute_metric(rl, name, normalization)
    return reports


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired Student t-test of ``a`` against ``b``.

    Identical samples give ``(0, 1)``. When every difference is the same
    nonzero constant the statistic is infinite and ``p`` is 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples need equal 1-d shapes, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = math.fsum(d) / n
    centered = d - mean
    var = math.fsum(centered * centered) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(var / n)
    df = n - 1
    # two-sided tail of Student t: I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), min(1.0, p)

"""Routing metrics, evaluation reports and domain-cluster analysis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Collection, Iterable, Mapping, Sequence

import numpy as np

from dbroute.retrieval import RankedList

RECALL_CUTOFFS = (1, 2, 3, 5)


def _ids(ranked: RankedList | Sequence[str]) -> list[str]:
    return ranked.db_ids if isinstance(ranked, RankedList) else list(ranked)


def recall_at_k(
    ranked: RankedList | Sequence[str], gold: str, k: int, repository: Collection[str] | None = None
) -> int:
    if k < 1:
        raise ValueError("k must be at least 1")
    if repository is not None and gold not in repository:
        raise ValueError(f"gold database {gold!r} is not in the repository")
    return int(gold in _ids(ranked)[:k])


def average_precision(ranked: RankedList | Sequence[str], gold: str) -> float:
    """With a single relevant database AP is 1/rank, or 0 when it is missing."""
    ids = _ids(ranked)
    return 1.0 / (ids.index(gold) + 1) if gold in ids else 0.0


def mean_average_precision(reports: Iterable[tuple[RankedList | Sequence[str], str]]) -> float:
    values = [average_precision(r, g) for r, g in reports]
    if not values:
        raise ValueError("mean average precision of an empty report list")
    return sum(values) / len(values)


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    gold_db_id: str
    ranked: tuple[str, ...]
    scores: tuple[float, ...] = ()

    @property
    def gold_rank(self) -> int | None:
        try:
            return self.ranked.index(self.gold_db_id) + 1
        except ValueError:
            return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "gold_db_id": self.gold_db_id,
            "ranked": list(self.ranked),
            "scores": list(self.scores),
            "gold_rank": self.gold_rank,
        }


@dataclass
class EvalReport:
    records: list[QueryRecord]
    config: dict[str, Any] = field(default_factory=dict)
    candidate_misses: int = 0
    explanations: dict[str, Any] = field(default_factory=dict)
    errors: dict[str, list[str]] = field(default_factory=dict)  # query_id -> "db: message"

    @classmethod
    def from_rankings(
        cls,
        rankings: Iterable[tuple[str, str, RankedList]],
        config: Mapping[str, Any] | None = None,
        candidate_misses: int = 0,
    ) -> EvalReport:
        records = [
            QueryRecord(qid, gold, tuple(r.db_ids), tuple(s for _, s in r.items)) for qid, gold, r in rankings
        ]
        return cls(records, dict(config or {}), candidate_misses)

    @property
    def aggregates(self) -> dict[str, float]:
        if not self.records:
            raise ValueError("report has no queries")
        n = len(self.records)
        out = {
            f"recall@{k}": sum(recall_at_k(r.ranked, r.gold_db_id, k) for r in self.records) / n
            for k in RECALL_CUTOFFS
        }
        out["map"] = mean_average_precision((r.ranked, r.gold_db_id) for r in self.records)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "queries": len(self.records),
            "candidate_misses": self.candidate_misses,
            "aggregates": self.aggregates,
            "records": [r.to_dict() for r in self.records],
            **({"explanations": self.explanations} if self.explanations else {}),
            **({"errors": self.errors} if self.errors else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        agg = self.aggregates
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["stage", "queries", "candidate_misses", *agg]
        writer.writerow(header)
        writer.writerow(
            [self.config.get("stage", ""), len(self.records), self.candidate_misses, *(f"{v:.6f}" for v in agg.values())]
        )
        return buf.getvalue()


def compare_reports(with_: EvalReport, without: EvalReport) -> dict[str, float]:
    a, b = with_.aggregates, without.aggregates
    return {key: a[key] - b[key] for key in a}


# ---------------------------------------------------------------------------
# size-constrained k-means


class InfeasibleBounds(ValueError):
    pass


@dataclass(frozen=True)
class ClusterAssignment:
    labels: Mapping[str, int]
    sizes: tuple[int, ...]
    min_size: int
    max_size: int
    iterations: int = 0
    converged: bool = True
    size_history: tuple[tuple[int, ...], ...] = ()
    cost: float = 0.0

    def members(self, cluster: int) -> list[str]:
        return sorted(db for db, c in self.labels.items() if c == cluster)

    def to_dict(self) -> dict[str, Any]:
        return {
            "labels": dict(sorted(self.labels.items())),
            "sizes": list(self.sizes),
            "min_size": self.min_size,
            "max_size": self.max_size,
            "iterations": self.iterations,
            "converged": self.converged,
            "cost": self.cost,
        }


def _bounded_assignment(dist: np.ndarray, k: int, lo: int, hi: int) -> np.ndarray:
    """Greedy capacity-bounded assignment followed by improving moves and swaps.

    Phase one fills every cluster to ``lo`` taking (point, cluster) pairs in
    order of distance, phase two places the remaining points under the ``hi``
    cap, then single moves and pairwise swaps are applied while they lower the
    total cost.
    """
    n = dist.shape[0]
    labels = np.full(n, -1)
    sizes = np.zeros(k, dtype=int)
    order = np.argsort(dist, axis=None, kind="stable")
    for cap in (lo, hi):
        for flat in order:
            p, c = divmod(int(flat), k)
            if labels[p] < 0 and sizes[c] < cap:
                labels[p] = c
                sizes[c] += 1
        if cap == lo and np.all(sizes >= lo) and (labels >= 0).all():
            break
    assert (labels >= 0).all()

    improved = True
    while improved:
        improved = False
        # single moves that keep both clusters within bounds
        for p in range(n):
            a = labels[p]
            if sizes[a] <= lo:
                continue
            gains = dist[p, a] - dist[p]
            gains[a] = 0.0
            gains[sizes >= hi] = 0.0
            b = int(np.argmax(gains))
            if gains[b] > 1e-12:
                labels[p] = b
                sizes[a] -= 1
                sizes[b] += 1
                improved = True
        # pairwise swaps keep sizes unchanged
        for p in range(n):
            a = labels[p]
            current = dist[p, a] + dist[np.arange(n), labels]
            swapped = dist[p, labels] + dist[np.arange(n), a]
            gain = current - swapped
            gain[labels == a] = 0.0
            q = int(np.argmax(gain))
            if gain[q] > 1e-12:
                labels[p], labels[q] = labels[q], a
                improved = True
    return labels


def constrained_kmeans(
    vectors: Mapping[str, Sequence[float] | np.ndarray],
    k: int,
    min_size: int,
    max_size: int,
    seed: int = 0,
    max_iter: int = 100,
) -> ClusterAssignment:
    """k-means whose every cluster holds between ``min_size`` and ``max_size`` points.

    Centroids start from k-means++ under ``seed``; the assignment step is the
    bounded greedy-plus-swap procedure, so the size bounds hold after every
    iteration.  Points are processed in sorted db_id order.
    """
    ids = sorted(vectors)
    n = len(ids)
    if k < 1 or min_size < 0 or max_size < min_size or not (k * min_size <= n <= k * max_size):
        raise InfeasibleBounds(f"cannot place {n} points into {k} clusters of size [{min_size}, {max_size}]")
    X = np.asarray([np.asarray(vectors[i], dtype=np.float64) for i in ids])
    rng = np.random.default_rng(seed)

    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
    C = np.asarray(centers)

    labels = np.full(n, -1)
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        new = _bounded_assignment(dist, k, min_size, max_size)
        sizes = np.bincount(new, minlength=k)
        history.append(tuple(int(s) for s in sizes))
        if np.array_equal(new, labels):
            converged = True
            break
        labels = new
        for c in range(k):
            if sizes[c]:
                C[c] = X[labels == c].mean(axis=0)
    sizes = np.bincount(labels, minlength=k)
    cost = float(((X - C[labels]) ** 2).sum())
    return ClusterAssignment(
        {db: int(c) for db, c in zip(ids, labels)},
        tuple(int(s) for s in sizes),
        min_size,
        max_size,
        iterations,
        converged,
        tuple(history),
        cost,
    )


def intra_cluster_confusion(
    records: Sequence[QueryRecord], clusters: ClusterAssignment, top: int = 5
) -> dict[str, Any]:
    """How often routing errors stay within the gold database's cluster.

    Over queries whose gold database is not ranked first: the share whose
    rank-1 database shares the gold's cluster, and the share with at least two
    databases from the gold's cluster in the top ``top``.
    """
    labels = clusters.labels
    errors = [r for r in records if not r.ranked or r.ranked[0] != r.gold_db_id]
    if not errors:
        return {"errors": 0, "top1_same_cluster": 0.0, "multi_same_cluster_top5": 0.0}
    same_top1 = 0
    multi = 0
    for r in errors:
        gold_cluster = labels[r.gold_db_id]
        if r.ranked and labels.get(r.ranked[0]) == gold_cluster:
            same_top1 += 1
        if sum(1 for db in r.ranked[:top] if labels.get(db) == gold_cluster) >= 2:
            multi += 1
    return {
        "errors": len(errors),
        "top1_same_cluster": same_top1 / len(errors),
        "multi_same_cluster_top5": multi / len(errors),
    }

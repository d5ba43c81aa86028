"""Coverage, connectivity, total and semantic scores, and the modular re-ranker built on them."""

from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from dbroute.embeddings import EmbeddingProvider, ProviderError, cosine_similarity
from dbroute.reasoner import (
    Candidate,
    PhraseMapping,
    ReasonerError,
    ReasonerProvider,
    map_query_phrases,
)
from dbroute.retrieval import RankedList
from dbroute.schema import DatabaseSchema, SchemaGraph, connected_components, is_connected_subset

log = logging.getLogger(__name__)

ZERO_PHRASE_POLICIES = ("invalid", "neutral")
SEMANTIC_MODES = ("all_pairs", "phrase_max")


@dataclass(frozen=True)
class CoverageInput:
    total_mappings: int
    na_mappings: int
    n: float = 1.0

    def __post_init__(self) -> None:
        if self.total_mappings < 1:
            raise ValueError("coverage needs at least one phrase")
        if not 0 <= self.na_mappings <= self.total_mappings:
            raise ValueError("na_mappings must lie in [0, total_mappings]")
        if not self.n >= 1:
            raise ValueError("penalty n must be >= 1")

    @classmethod
    def from_mappings(cls, mappings: Sequence[PhraseMapping], n: float = 1.0) -> CoverageInput:
        return cls(len(mappings), sum(1 for m in mappings if not m.mapped), n)


def coverage_score(inp: CoverageInput) -> float:
    """exp(-n * na/total)."""
    return math.exp(-inp.n * (inp.na_mappings / inp.total_mappings))


@dataclass(frozen=True)
class RerankConfig:
    n: float = 1.0
    k: int = 5
    allow_steiner_tables: bool = True
    zero_phrase_policy: str = "invalid"
    max_assignments: int = 10_000
    semantic_mode: str = "all_pairs"

    def __post_init__(self) -> None:
        if not self.n >= 1:
            raise ValueError("n must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.zero_phrase_policy not in ZERO_PHRASE_POLICIES:
            raise ValueError(f"zero_phrase_policy must be one of {ZERO_PHRASE_POLICIES}")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        if self.max_assignments < 1:
            raise ValueError("max_assignments must be >= 1")


Witness = tuple[tuple[str, Candidate], ...]


@dataclass(frozen=True)
class Connectivity:
    value: int
    witness: Witness | None = None
    tables: tuple[int, ...] | None = None  # tables spanning the witness, incl. junctions
    relaxed: bool = False

    def __iter__(self):
        # allows ``value, witness = connectivity_score(...)``
        return iter((self.value, self.witness))


def _connecting_tables(graph: SchemaGraph, chosen: set[int], allow_steiner: bool) -> tuple[int, ...]:
    """Tables on BFS paths from one chosen table to the others."""
    if len(chosen) <= 1:
        return tuple(sorted(chosen))
    root = min(chosen)
    parent = {root: root}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for nbr in sorted(graph.adjacency[node]):
            if nbr in parent or (not allow_steiner and nbr not in chosen):
                continue
            parent[nbr] = node
            queue.append(nbr)
    span = set()
    for t in chosen:
        while t != root:
            span.add(t)
            t = parent[t]
    span.add(root)
    return tuple(sorted(span))


def _per_phrase_options(mappings: Sequence[PhraseMapping], graph: SchemaGraph) -> list[tuple[str, list[Candidate]]]:
    options = []
    for m in mappings:
        if not m.mapped:
            continue
        by_table: dict[int, Candidate] = {}
        for cand in m.columns:
            if not 0 <= cand.table_index < graph.n_tables:
                raise IndexError(
                    f"candidate {cand.label} names table {cand.table_index}, graph has {graph.n_tables}"
                )
            by_table.setdefault(cand.table_index, cand)
        options.append((m.phrase, list(by_table.values())))
    return options


def _component_witness(graph: SchemaGraph, options: list[tuple[str, list[Candidate]]]) -> Witness | None:
    # with junction tables allowed, an assignment works iff all picks share a component
    for comp in sorted(connected_components(graph), key=min):
        picks = []
        for phrase, cands in options:
            inside = [c for c in cands if c.table_index in comp]
            if not inside:
                break
            picks.append((phrase, inside[0]))
        else:
            return tuple(picks)
    return None


def connectivity_score(
    mappings: Sequence[PhraseMapping], graph: SchemaGraph, config: RerankConfig | None = None
) -> Connectivity:
    """1 if some one-candidate-per-phrase choice puts all chosen tables in one connected piece.

    Only phrases with a real candidate take part.  With
    ``config.allow_steiner_tables`` paths may run through unmapped tables;
    otherwise only edges among the chosen tables count, and enumeration is
    capped at ``config.max_assignments`` before falling back to the relaxed
    check.
    """
    config = config or RerankConfig()
    options = _per_phrase_options(mappings, graph)
    if not options:
        return Connectivity(1)
    all_tables = {c.table_index for _, cands in options for c in cands}
    if len(all_tables) <= 1:
        witness = tuple((phrase, cands[0]) for phrase, cands in options)
        return Connectivity(1, witness, tuple(sorted(all_tables)))

    if config.allow_steiner_tables:
        witness = _component_witness(graph, options)
        if witness is None:
            return Connectivity(0)
        chosen = {c.table_index for _, c in witness}
        return Connectivity(1, witness, _connecting_tables(graph, chosen, True))

    phrases = [p for p, _ in options]
    for checked, combo in enumerate(itertools.product(*(cands for _, cands in options))):
        if checked >= config.max_assignments:
            log.warning(
                "%s: more than %d assignments, downgrading to relaxed connectivity",
                graph.db_id, config.max_assignments,
            )
            witness = _component_witness(graph, options)
            if witness is None:
                return Connectivity(0, relaxed=True)
            chosen = {c.table_index for _, c in witness}
            return Connectivity(1, witness, _connecting_tables(graph, chosen, True), relaxed=True)
        chosen = {c.table_index for c in combo}
        if is_connected_subset(graph, chosen):
            witness = tuple(zip(phrases, combo))
            return Connectivity(1, witness, _connecting_tables(graph, chosen, False))
    return Connectivity(0)


def total_score(coverage: float, connectivity: int) -> float:
    if not 0.0 < coverage <= 1.0:
        raise ValueError("coverage must lie in (0, 1]")
    if connectivity not in (0, 1):
        raise ValueError("connectivity must be 0 or 1")
    return coverage * connectivity


def column_document(schema: DatabaseSchema, cand: Candidate) -> str:
    """Text embedded for a mapped column: ``table.column: description``."""
    desc = schema.tables[cand.table_index].columns[cand.column_index].description
    return f"{cand.label}: {desc}" if desc else cand.label


def semantic_score(
    mappings: Sequence[PhraseMapping],
    schema: DatabaseSchema,
    embedder: EmbeddingProvider,
    mode: str = "all_pairs",
) -> float:
    """Mean cosine similarity between mapped phrases and their column documents.

    ``all_pairs`` averages over every (phrase, candidate) pair;
    ``phrase_max`` takes each phrase's best candidate and averages over
    phrases.  No mapped phrase gives 0.
    """
    pairs = [(m.phrase, c) for m in mappings for c in m.columns]
    if not pairs:
        return 0.0
    texts = sorted({p for p, _ in pairs} | {column_document(schema, c) for _, c in pairs})
    vectors = dict(zip(texts, embedder.embed_batch(texts)))
    sims: dict[str, list[float]] = {}
    for phrase, cand in pairs:
        sim = cosine_similarity(vectors[phrase], vectors[column_document(schema, cand)])
        sims.setdefault(phrase, []).append(sim)
    if mode == "all_pairs":
        values = [s for group in sims.values() for s in group]
    elif mode == "phrase_max":
        values = [max(group) for group in sims.values()]
    else:
        raise ValueError(f"unknown semantic mode {mode!r}")
    return sum(values) / len(values)


@dataclass(frozen=True)
class RoutingScore:
    db_id: str
    coverage: float
    connectivity: int
    total: float
    semantic: float
    witness: Witness | None = None
    witness_tables: tuple[int, ...] | None = None
    mappings: tuple[PhraseMapping, ...] = field(default=(), compare=False)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "db_id": self.db_id,
            "coverage": self.coverage,
            "connectivity": self.connectivity,
            "total": self.total,
            "semantic": self.semantic,
            "phrases": [m.to_dict() for m in self.mappings],
            "witness": None
            if self.witness is None
            else [{"phrase": p, "table": c.table, "column": c.column} for p, c in self.witness],
            "witness_tables": None if self.witness_tables is None else list(self.witness_tables),
            "error": self.error,
        }


def score_mappings(
    db_id: str,
    mappings: Sequence[PhraseMapping],
    schema: DatabaseSchema,
    graph: SchemaGraph,
    embedder: EmbeddingProvider,
    config: RerankConfig,
) -> RoutingScore:
    mappings = tuple(mappings)
    if not mappings:
        if config.zero_phrase_policy == "invalid":
            return RoutingScore(db_id, 0.0, 0, 0.0, 0.0, mappings=mappings)
        return RoutingScore(db_id, 1.0, 1, 1.0, 0.0, mappings=mappings)
    coverage = coverage_score(CoverageInput.from_mappings(mappings, config.n))
    conn = connectivity_score(mappings, graph, config)
    semantic = semantic_score(mappings, schema, embedder, config.semantic_mode)
    return RoutingScore(
        db_id,
        coverage,
        conn.value,
        total_score(coverage, conn.value),
        semantic,
        conn.witness,
        conn.tables if conn.witness else None,
        mappings,
    )


GraphSource = Mapping[str, SchemaGraph] | Callable[[str], SchemaGraph]


def modular_rerank(
    query: str,
    candidates: RankedList,
    schemas: Mapping[str, DatabaseSchema],
    graphs: GraphSource,
    reasoner: ReasonerProvider,
    embedder: EmbeddingProvider,
    config: RerankConfig | None = None,
    parallelism: int = 1,
) -> RankedList:
    """Re-order candidates by total score, then semantic score, then db_id.

    A database whose graph or mapping step fails gets total 0 and an error
    note instead of aborting the query.
    """
    config = config or RerankConfig()
    if not candidates.items:
        raise ValueError("no candidates to re-rank")
    get_graph = graphs if callable(graphs) else graphs.__getitem__

    def score(db_id: str) -> RoutingScore:
        schema = schemas[db_id]
        try:
            graph = get_graph(db_id)
            mappings = map_query_phrases(query, schema, reasoner)
        except (ReasonerError, ProviderError) as exc:
            log.warning("%s: scoring failed: %s", db_id, exc)
            return RoutingScore(db_id, 0.0, 0, 0.0, 0.0, error=f"{type(exc).__name__}: {exc}")
        return score_mappings(db_id, mappings, schema, graph, embedder, config)

    ids = candidates.db_ids
    if parallelism > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            scores = list(pool.map(score, ids))
    else:
        scores = [score(db) for db in ids]
    ordered = sorted(scores, key=lambda s: (-s.total, -s.semantic, s.db_id))
    return RankedList(
        candidates.query_id,
        tuple((s.db_id, s.total) for s in ordered),
        "modular_rerank",
        {s.db_id: s for s in ordered},
    )

"""End-to-end routing: configuration, provider construction, the router and batch evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from dbroute.corpus import QuerySample
from dbroute.embeddings import CachedEmbedder, EmbeddingProvider, HashingEmbedder, HttpEmbedder, ProviderError
from dbroute.evaluation import EvalReport, compare_reports
from dbroute.reasoner import (
    HttpReasoner,
    ReasonerError,
    ReasonerProvider,
    TranscriptProvider,
    direct_rerank,
    infer_join_adjacency,
    load_template,
)
from dbroute.retrieval import RankedList, RepositoryIndex, build_index, rank_by_similarity, top_k
from dbroute.schema import DatabaseSchema, SchemaGraph, build_join_graph_from_keys
from dbroute.scoring import RerankConfig, modular_rerank

log = logging.getLogger(__name__)

MODES = ("retrieval", "direct-rerank", "modular-rerank")
GRAPH_SOURCES = ("keys", "llm", "llm-fallback")
ENV_PREFIX = "DBROUTE_"


@dataclass
class PipelineConfig:
    mode: str = "modular-rerank"
    k: int = 5
    n: float = 1.0
    allow_steiner_tables: bool = True
    zero_phrase_policy: str = "invalid"
    semantic_mode: str = "all_pairs"
    max_assignments: int = 10_000
    graph_source: str = "keys"
    name_heuristic: bool = True
    include_metadata: bool = True
    document_style: str = "ddl"
    oracle_injection: bool = False
    seed: int = 0
    parallelism: int = 1
    # paths
    repository: str | None = None
    questions: list[str] = field(default_factory=list)
    split: str | None = None
    index: str | None = None
    cache_dir: str | None = None
    prompts_dir: str | None = None
    replay: str | None = None
    record: str | None = None
    # providers
    embedder: dict[str, Any] = field(default_factory=lambda: {"kind": "hashing", "dimension": 512})
    reasoner: dict[str, Any] = field(default_factory=lambda: {"kind": "none"})

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.graph_source not in GRAPH_SOURCES:
            raise ValueError(f"graph_source must be one of {GRAPH_SOURCES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.n >= 1:
            raise ValueError("n must be >= 1")
        self.rerank_config()

    def rerank_config(self) -> RerankConfig:
        return RerankConfig(
            n=self.n,
            k=self.k,
            allow_steiner_tables=self.allow_steiner_tables,
            zero_phrase_policy=self.zero_phrase_policy,
            max_assignments=self.max_assignments,
            semantic_mode=self.semantic_mode,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def resolve(
        cls,
        config_file: Path | str | None = None,
        overrides: Mapping[str, Any] | None = None,
        environ: Mapping[str, str] | None = None,
    ) -> PipelineConfig:
        """Merge defaults < environment < config file < explicit overrides."""
        environ = os.environ if environ is None else environ
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values: dict[str, Any] = {}
        for name, f in fields.items():
            raw = environ.get(ENV_PREFIX + name.upper())
            if raw is None:
                continue
            values[name] = _coerce(raw, f.type)
        if config_file is not None:
            with open(config_file, encoding="utf-8") as fh:
                doc = json.load(fh)
            unknown = set(doc) - set(fields)
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            values.update(doc)
        for key, value in (overrides or {}).items():
            if value is not None:
                if key not in fields:
                    raise ValueError(f"unknown config key {key!r}")
                values[key] = value
        return cls(**values)


def _coerce(raw: str, type_name: Any) -> Any:
    t = str(type_name)
    if t.startswith("bool"):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    if t.startswith(("dict", "list")):
        return json.loads(raw)
    return raw


def make_embedder(config: PipelineConfig) -> EmbeddingProvider:
    options = dict(config.embedder)
    kind = options.pop("kind", "hashing")
    if kind == "hashing":
        inner: EmbeddingProvider = HashingEmbedder(**options)
    elif kind == "http":
        options.setdefault("parallelism", config.parallelism)
        inner = HttpEmbedder(**options)
    else:
        raise ValueError(f"unknown embedder kind {kind!r}")
    if config.cache_dir:
        return CachedEmbedder(inner, Path(config.cache_dir) / "embeddings")
    return inner


def make_reasoner(config: PipelineConfig) -> ReasonerProvider | None:
    if config.replay:
        return TranscriptProvider(config.replay, "replay")
    options = dict(config.reasoner)
    kind = options.pop("kind", "none")
    if kind == "none":
        inner = None
    elif kind == "http":
        inner = HttpReasoner(**options)
    elif kind == "lexical":
        from dbroute.mock import LexicalReasoner

        inner = LexicalReasoner(**options)
    else:
        raise ValueError(f"unknown reasoner kind {kind!r}")
    if inner is not None and config.record:
        return TranscriptProvider(config.record, "record", inner)
    return inner


class Router:
    """Routes questions through retrieval and the configured re-ranking stage."""

    def __init__(
        self,
        repository: Sequence[DatabaseSchema],
        index: RepositoryIndex,
        embedder: EmbeddingProvider,
        reasoner: ReasonerProvider | None,
        config: PipelineConfig,
    ):
        self.schemas = {s.db_id: s for s in repository}
        missing = set(index.db_ids) ^ set(self.schemas)
        if missing:
            raise ValueError(f"index and repository disagree on databases: {sorted(missing)[:5]}")
        self.index = index
        self.embedder = embedder
        self.reasoner = reasoner
        self.config = config
        self.rerank_config = config.rerank_config()
        self._graphs: dict[str, SchemaGraph] = {}
        self._graph_lock = threading.Lock()
        self._templates = {
            name: load_template(name, config.prompts_dir)
            for name in ("join_graph", "phrase_mapping", "direct_rerank")
        }
        if config.mode != "retrieval" and reasoner is None:
            raise ValueError(f"mode {config.mode!r} needs a reasoner (or --replay transcript)")

    def graph(self, db_id: str) -> SchemaGraph:
        """Join graph for one database, built once and cached."""
        with self._graph_lock:
            if db_id in self._graphs:
                return self._graphs[db_id]
        schema = self.schemas[db_id]
        source = self.config.graph_source
        if source == "keys":
            graph = build_join_graph_from_keys(schema, self.config.name_heuristic)
        else:
            assert self.reasoner is not None
            try:
                graph = infer_join_adjacency(schema, self.reasoner, template=self._templates["join_graph"])
            except (ReasonerError, ProviderError) as exc:
                if source == "llm":
                    raise
                log.warning("%s: join-graph inference failed (%s); using declared keys", db_id, exc)
                graph = build_join_graph_from_keys(schema, self.config.name_heuristic)
        with self._graph_lock:
            return self._graphs.setdefault(db_id, graph)

    def candidates(self, question: str, query_id: str = "", gold: str | None = None) -> tuple[RankedList, bool]:
        """Top-k retrieval candidates and whether the gold database was among them."""
        full = rank_by_similarity(question, self.index, self.embedder, query_id)
        cands = top_k(full, self.config.k)
        hit = gold is None or gold in cands.db_ids
        if not hit and self.config.oracle_injection:
            gold_item = next(item for item in full.items if item[0] == gold)
            cands = RankedList(query_id, cands.items[: self.config.k - 1] + (gold_item,), "retrieval")
        return cands, hit

    def route(self, question: str, query_id: str = "", gold: str | None = None) -> RankedList:
        if self.config.mode == "retrieval":
            return rank_by_similarity(question, self.index, self.embedder, query_id)
        cands, _ = self.candidates(question, query_id, gold)
        return self._rerank(question, query_id, cands)

    def _rerank(self, question: str, query_id: str, cands: RankedList) -> RankedList:
        assert self.reasoner is not None
        if self.config.mode == "direct-rerank":
            return direct_rerank(
                query_id, question, cands, self.schemas, self.reasoner,
                include_metadata=self.config.include_metadata,
                template=self._templates["direct_rerank"],
            ).to_ranked_list()
        return modular_rerank(
            question, cands, self.schemas, self.graph, self.reasoner, self.embedder,
            self.rerank_config,
        )


def run_evaluation(router: Router, samples: Sequence[QuerySample], explain: bool = False) -> EvalReport:
    if not samples:
        raise ValueError("no queries to evaluate")

    def one(sample: QuerySample) -> tuple[QuerySample, RankedList, bool]:
        cands, hit = router.candidates(sample.text, sample.query_id, sample.gold_db_id)
        if router.config.mode == "retrieval":
            ranked = rank_by_similarity(sample.text, router.index, router.embedder, sample.query_id)
        else:
            ranked = router._rerank(sample.text, sample.query_id, cands)
        return sample, ranked, hit

    if router.config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=router.config.parallelism) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(s) for s in samples]
    stage = {"retrieval": "retrieval", "direct-rerank": "direct_rerank", "modular-rerank": "modular_rerank"}
    config = {
        "stage": stage[router.config.mode],
        "k": router.config.k,
        "n": router.config.n,
        "include_metadata": router.index.include_metadata,
        "document_style": router.index.document_style,
        "embedder": router.embedder.model_id,
        "reasoner": router.reasoner.model_id if router.reasoner is not None else None,
        "graph_source": router.config.graph_source,
        "allow_steiner_tables": router.config.allow_steiner_tables,
        "oracle_injection": router.config.oracle_injection,
    }
    report = EvalReport.from_rankings(
        ((s.query_id, s.gold_db_id, r) for s, r, _ in results),
        config,
        candidate_misses=sum(1 for _, _, hit in results if not hit),
    )
    for s, r, _ in results:
        failed = [f"{db}: {d.error}" for db, d in r.details.items() if getattr(d, "error", None)]
        if failed:
            report.errors[s.query_id] = failed
    if explain:
        report.explanations = {
            s.query_id: {db: score.to_dict() for db, score in r.details.items()} for s, r, _ in results if r.details
        }
    return report


def ablate_metadata(
    repository: Sequence[DatabaseSchema],
    samples: Sequence[QuerySample],
    config: PipelineConfig,
    embedder: EmbeddingProvider,
    reasoner: ReasonerProvider | None,
) -> dict[str, Any]:
    """Run the same pipeline with and without metadata in the schema documents."""
    reports = {}
    for flag in (True, False):
        cfg = dataclasses.replace(config, include_metadata=flag)
        index = build_index(repository, embedder, include_metadata=flag, document_style=cfg.document_style)
        if not flag:
            stripped = [s.without_metadata() for s in repository]
            router = Router(stripped, index, embedder, reasoner, cfg)
        else:
            router = Router(repository, index, embedder, reasoner, cfg)
        reports[flag] = run_evaluation(router, samples)
    return {
        "with_metadata": reports[True],
        "without_metadata": reports[False],
        "delta": compare_reports(reports[True], reports[False]),
    }

"""Repository index and the cosine-similarity ranking stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from dbroute.embeddings import EmbeddingProvider, as_vector, cosine_similarity
from dbroute.schema import DatabaseSchema, serialize_compact, serialize_schema_document
from dbroute.utils import atomic_write_text

INDEX_FORMAT = "dbroute-index"
INDEX_VERSION = 1
STAGES = ("retrieval", "direct_rerank", "modular_rerank")


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple[tuple[str, float], ...]
    stage: str = "retrieval"
    details: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        items = tuple((str(db), float(score)) for db, score in self.items)
        object.__setattr__(self, "items", items)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        ids = [db for db, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError("ranked list contains duplicate databases")
        for (_, a), (_, b) in zip(items, items[1:]):
            if b > a:
                raise ValueError("ranked list scores must be non-increasing")

    @property
    def db_ids(self) -> list[str]:
        return [db for db, _ in self.items]

    def rank_of(self, db_id: str) -> int | None:
        """1-based rank, or None if absent."""
        for i, (db, _) in enumerate(self.items, start=1):
            if db == db_id:
                return i
        return None

    def __len__(self) -> int:
        return len(self.items)


def top_k(ranked: RankedList, k: int) -> RankedList:
    if k < 1:
        raise ValueError("k must be at least 1")
    keep = ranked.items[:k]
    details = {db: ranked.details[db] for db, _ in keep if db in ranked.details}
    return RankedList(ranked.query_id, keep, ranked.stage, details)


def schema_document(
    schema: DatabaseSchema, include_metadata: bool = True, document_style: str = "ddl"
) -> str:
    """Document embedded for one database; evidence sentences are appended when metadata is on."""
    if document_style == "ddl":
        text = serialize_schema_document(schema, include_metadata=include_metadata)
    elif document_style == "compact":
        text = serialize_compact(schema)
    else:
        raise ValueError(f"unknown document style {document_style!r}")
    if include_metadata and schema.metadata:
        text += "Evidence:\n" + schema.metadata.text() + "\n"
    return text


@dataclass(frozen=True)
class RepositoryIndex:
    model_id: str
    dimension: int
    entries: Mapping[str, tuple[str, np.ndarray]]
    include_metadata: bool = True
    document_style: str = "ddl"

    def __post_init__(self) -> None:
        for db_id, (_, vec) in self.entries.items():
            if vec.shape != (self.dimension,):
                raise ValueError(f"{db_id}: vector dimension {vec.shape} != {self.dimension}")

    @property
    def db_ids(self) -> list[str]:
        return sorted(self.entries)

    def to_json(self) -> str:
        doc = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "model_id": self.model_id,
            "dimension": self.dimension,
            "include_metadata": self.include_metadata,
            "document_style": self.document_style,
            "entries": [
                {"db_id": db, "document": self.entries[db][0], "vector": self.entries[db][1].tolist()}
                for db in self.db_ids
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RepositoryIndex:
        doc = json.loads(text)
        if doc.get("format") != INDEX_FORMAT:
            raise ValueError("not a repository index file")
        if doc.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version {doc.get('version')!r}")
        dim = int(doc["dimension"])
        entries = {e["db_id"]: (e["document"], as_vector(e["vector"], dim)) for e in doc["entries"]}
        return cls(doc["model_id"], dim, entries, doc["include_metadata"], doc["document_style"])

    def save(self, path: Path | str) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: Path | str) -> RepositoryIndex:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RepositoryIndex):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None  # type: ignore[assignment]


def build_index(
    repo: Sequence[DatabaseSchema],
    provider: EmbeddingProvider,
    include_metadata: bool = True,
    document_style: str = "ddl",
) -> RepositoryIndex:
    if not repo:
        raise ValueError("repository is empty")
    docs = {s.db_id: schema_document(s, include_metadata, document_style) for s in repo}
    if len(docs) != len(repo):
        raise ValueError("duplicate db_id in repository")
    ids = sorted(docs)
    vectors = provider.embed_batch([docs[db] for db in ids])
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"provider returned inconsistent dimensions {sorted(dims)}")
    entries = {db: (docs[db], as_vector(vec)) for db, vec in zip(ids, vectors)}
    return RepositoryIndex(provider.model_id, dims.pop(), entries, include_metadata, document_style)


def sort_scored(scored: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending score, ties by ascending db_id."""
    return sorted(scored, key=lambda item: (-item[1], item[0]))


def rank_by_similarity(
    query: str, index: RepositoryIndex, provider: EmbeddingProvider, query_id: str = ""
) -> RankedList:
    if provider.model_id != index.model_id:
        raise ValueError(f"provider model {provider.model_id!r} does not match index model {index.model_id!r}")
    qvec = provider.embed(query)
    scored = [(db, cosine_similarity(qvec, index.entries[db][1])) for db in index.db_ids]
    return RankedList(query_id, tuple(sort_scored(scored)), "retrieval")

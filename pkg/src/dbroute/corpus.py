"""Routing benchmarks built from Spider/BIRD style question files."""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from dbroute.schema import DatabaseSchema, apply_column_metadata, load_catalog_file

ROUNDING_RULE = "train_ceil"


class CorpusError(ValueError):
    pass


def _normalize_sentence(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class EvidenceSet:
    """Deduplicated, sorted evidence sentences for one database."""

    items: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        normalized = {_normalize_sentence(s) for s in self.items}
        normalized.discard("")
        object.__setattr__(self, "items", tuple(sorted(normalized)))

    @classmethod
    def from_iterable(cls, sentences: Iterable[str]) -> EvidenceSet:
        return cls(tuple(sentences))

    def __len__(self) -> int:
        return len(self.items)

    def __bool__(self) -> bool:
        return bool(self.items)

    def text(self) -> str:
        return "\n".join(self.items)


@dataclass(frozen=True)
class QuerySample:
    query_id: str
    text: str
    gold_db_id: str
    evidence: str | None = None
    split: str | None = None
    sql: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict[str, Any]:
        out = {"query_id": self.query_id, "question": self.text, "db_id": self.gold_db_id}
        if self.evidence:
            out["evidence"] = self.evidence
        if self.split:
            out["split"] = self.split
        if self.sql:
            out["sql"] = self.sql
        return out


@dataclass(frozen=True)
class RoutingDataset:
    repository: tuple[DatabaseSchema, ...]
    train: tuple[QuerySample, ...] = ()
    test: tuple[QuerySample, ...] = ()
    cross_domain_db_ids: frozenset[str] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "repository", tuple(self.repository))
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        ids = [s.db_id for s in self.repository]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate db_id in repository")
        known = set(ids)
        for sample in self.train + self.test:
            if sample.gold_db_id not in known:
                raise CorpusError(f"query {sample.query_id!r} names unknown database {sample.gold_db_id!r}")
        overlap = {s.query_id for s in self.train} & {s.query_id for s in self.test}
        if overlap:
            raise CorpusError(f"queries in both train and test: {sorted(overlap)[:5]}")
        if self.cross_domain_db_ids is not None:
            leaked = [s.query_id for s in self.train if s.gold_db_id in self.cross_domain_db_ids]
            if leaked:
                raise CorpusError(f"held-out databases have train queries: {leaked[:5]}")

    @property
    def db_ids(self) -> list[str]:
        return [s.db_id for s in self.repository]

    def schema(self, db_id: str) -> DatabaseSchema:
        for s in self.repository:
            if s.db_id == db_id:
                return s
        raise KeyError(db_id)


def _rng_for(seed: int, db_id: str) -> np.random.Generator:
    # PCG64 stream keyed by (seed, crc32(db_id)); both fit the SeedSequence contract
    entropy = int(seed) & (2**64 - 1)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=(zlib.crc32(db_id.encode()),))))


def build_route_split(
    samples: Sequence[QuerySample], seed: int
) -> tuple[list[QuerySample], list[QuerySample]]:
    """Per-database 50-50 split of the questions.

    Each database's questions are shuffled with a PCG64 generator keyed by
    ``(seed, db_id)``; the first ceil(n/2) go to train.
    """
    if not samples:
        raise CorpusError("cannot split an empty sample list")
    ids = [s.query_id for s in samples]
    if len(set(ids)) != len(ids):
        raise CorpusError("query ids must be unique")
    by_db: OrderedDict[str, list[QuerySample]] = OrderedDict()
    for sample in samples:
        by_db.setdefault(sample.gold_db_id, []).append(sample)
    train: list[QuerySample] = []
    test: list[QuerySample] = []
    for db_id, group in by_db.items():
        order = _rng_for(seed, db_id).permutation(len(group))
        n_train = math.ceil(len(group) / 2)
        for rank, idx in enumerate(order):
            sample = group[int(idx)]
            if rank < n_train:
                train.append(replace(sample, split="train"))
            else:
                test.append(replace(sample, split="test"))
    return train, test


def split_manifest(seed: int, train: Sequence[QuerySample], test: Sequence[QuerySample]) -> dict[str, Any]:
    return {
        "seed": seed,
        "rounding": ROUNDING_RULE,
        "train": [s.query_id for s in train],
        "test": [s.query_id for s in test],
    }


def apply_manifest(
    samples: Sequence[QuerySample], manifest: Mapping[str, Any]
) -> tuple[list[QuerySample], list[QuerySample]]:
    by_id = {s.query_id: s for s in samples}
    try:
        train = [replace(by_id[q], split="train") for q in manifest["train"]]
        test = [replace(by_id[q], split="test") for q in manifest["test"]]
    except KeyError as exc:
        raise CorpusError(f"split manifest names unknown query {exc.args[0]!r}") from None
    return train, test


def merge_evidence(samples: Iterable[QuerySample]) -> dict[str, EvidenceSet]:
    """Union of the question-level evidence of each database."""
    pooled: dict[str, list[str]] = {}
    for sample in samples:
        bucket = pooled.setdefault(sample.gold_db_id, [])
        if sample.evidence and sample.evidence.strip():
            bucket.append(sample.evidence)
    return {db: EvidenceSet.from_iterable(items) for db, items in pooled.items()}


def attach_evidence(
    repository: Sequence[DatabaseSchema], evidence: Mapping[str, EvidenceSet]
) -> list[DatabaseSchema]:
    return [
        replace(schema, metadata=evidence[schema.db_id]) if schema.db_id in evidence else schema
        for schema in repository
    ]


def make_cross_domain(dataset: RoutingDataset, held_out_db_ids: Iterable[str]) -> RoutingDataset:
    held_out = frozenset(held_out_db_ids)
    unknown = held_out - set(dataset.db_ids)
    if unknown:
        raise CorpusError(f"unknown database ids: {sorted(unknown)}")
    train = tuple(s for s in dataset.train if s.gold_db_id not in held_out)
    return replace(dataset, train=train, cross_domain_db_ids=held_out)


def dataset_stats(dataset: RoutingDataset) -> dict[str, Any]:
    train = Counter(s.gold_db_id for s in dataset.train)
    test = Counter(s.gold_db_id for s in dataset.test)
    per_db = {
        db: {"train": train.get(db, 0), "test": test.get(db, 0), "total": train.get(db, 0) + test.get(db, 0)}
        for db in sorted(dataset.db_ids)
    }
    return {
        "databases": len(dataset.repository),
        "total_questions": len(dataset.train) + len(dataset.test),
        "train_questions": len(dataset.train),
        "test_questions": len(dataset.test),
        "odd_count_databases": sum(1 for v in per_db.values() if v["total"] % 2),
        "per_db": per_db,
    }


# ---------------------------------------------------------------------------
# loaders


def load_questions(paths: Sequence[Path | str]) -> list[QuerySample]:
    """Read Spider/BIRD question files.

    BIRD's ``question_id`` becomes the query id when present; otherwise ids
    are ``<file stem>-<row>``.  BIRD's ``evidence`` is kept, the SQL is carried
    through untouched.
    """
    samples = []
    for path in paths:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            rows = json.load(fh)
        for i, row in enumerate(rows):
            qid = row.get("query_id") or row.get("question_id")
            samples.append(
                QuerySample(
                    query_id=str(qid) if qid is not None else f"{path.stem}-{i}",
                    text=row["question"],
                    gold_db_id=row["db_id"],
                    evidence=row.get("evidence") or None,
                    sql=row.get("query") or row.get("SQL") or row.get("sql"),
                )
            )
    return samples


def load_repository(catalogs: Sequence[Path | str], metadata_root: Path | str | None = None) -> list[DatabaseSchema]:
    """Merge catalog files into one repository, optionally with BIRD descriptions.

    ``metadata_root`` is searched for ``<db_id>/database_description/*.csv``.
    """
    repo: dict[str, DatabaseSchema] = {}
    for path in catalogs:
        for schema in load_catalog_file(path):
            if schema.db_id in repo:
                if repo[schema.db_id] != schema:
                    raise CorpusError(f"conflicting definitions of database {schema.db_id!r}")
                continue
            repo[schema.db_id] = schema
    if metadata_root is not None:
        root = Path(metadata_root)
        for db_id, schema in repo.items():
            desc_dir = root / db_id / "database_description"
            if desc_dir.is_dir():
                repo[db_id] = apply_column_metadata(schema, sorted(desc_dir.glob("*.csv")))
    return list(repo.values())


def save_repository(repository: Sequence[DatabaseSchema]) -> str:
    return json.dumps([s.to_dict() for s in repository], indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def read_repository(path: Path | str) -> list[DatabaseSchema]:
    with open(path, encoding="utf-8") as fh:
        return [DatabaseSchema.from_dict(d) for d in json.load(fh)]

"""Command-line interface: ingest, split, index, route, evaluate, analyze-clusters."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from dbroute.corpus import (
    CorpusError,
    RoutingDataset,
    apply_manifest,
    attach_evidence,
    build_route_split,
    dataset_stats,
    load_questions,
    make_cross_domain,
    merge_evidence,
    read_repository,
    save_repository,
    split_manifest,
)
from dbroute.ddl import parse_ddl
from dbroute.embeddings import ProviderError
from dbroute.evaluation import EvalReport, InfeasibleBounds, QueryRecord, constrained_kmeans, intra_cluster_confusion
from dbroute.pipeline import MODES, PipelineConfig, Router, ablate_metadata, make_embedder, make_reasoner, run_evaluation
from dbroute.reasoner import ReasonerError
from dbroute.retrieval import RepositoryIndex, build_index
from dbroute.schema import DatabaseSchema, SchemaError, apply_column_metadata, load_catalog
from dbroute.utils import atomic_write_text

log = logging.getLogger("dbroute")

EXIT_OK = 0
EXIT_PROVIDER = 1
EXIT_INVALID = 2


class UsageError(Exception):
    pass


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _config(args: argparse.Namespace, **extra: Any) -> PipelineConfig:
    overrides = {
        "seed": args.seed,
        "parallelism": args.parallelism,
        "replay": args.replay,
        "record": args.record,
        **extra,
    }
    if getattr(args, "reasoner", None):
        overrides["reasoner"] = {"kind": args.reasoner}
    try:
        return PipelineConfig.resolve(args.config, overrides)
    except (ValueError, OSError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _load_repo(cfg: PipelineConfig) -> list[DatabaseSchema]:
    return read_repository(_require(cfg.repository, "repository file"))


def _load_index(cfg: PipelineConfig) -> RepositoryIndex:
    return RepositoryIndex.load(_require(cfg.index, "index file"))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args: argparse.Namespace) -> int:
    schemas: dict[str, DatabaseSchema] = {}
    failures: list[str] = []

    def add(schema: DatabaseSchema) -> None:
        if schema.db_id in schemas and schemas[schema.db_id] != schema:
            failures.append(f"{schema.db_id}: conflicting definitions")
        schemas[schema.db_id] = schema

    for path in args.catalog or ():
        with open(_require(path, "catalog"), encoding="utf-8") as fh:
            records = json.load(fh)
        for i, record in enumerate(records):
            try:
                add(load_catalog(record))
            except SchemaError as exc:
                failures.append(f"{record.get('db_id', f'record {i}')}: {exc}")
    for path in args.ddl or ():
        p = _require(path, "DDL file")
        try:
            add(parse_ddl(p.read_text(encoding="utf-8"), db_id=p.stem))
        except SchemaError as exc:
            failures.append(f"{p.stem}: {exc}")
    if args.metadata_root:
        root = _require(args.metadata_root, "metadata root")
        for db_id, schema in list(schemas.items()):
            desc = root / db_id / "database_description"
            if desc.is_dir():
                schemas[db_id] = apply_column_metadata(schema, sorted(desc.glob("*.csv")))
    if args.questions:
        samples = load_questions([_require(q, "questions file") for q in args.questions])
        repo = attach_evidence(list(schemas.values()), merge_evidence(samples))
        schemas = {s.db_id: s for s in repo}
    if failures:
        for line in failures:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_INVALID
    if not schemas:
        raise UsageError("nothing to ingest: give --catalog or --ddl")
    repo = [schemas[k] for k in sorted(schemas)]
    for s in repo:
        n_fk = sum(len(t.foreign_keys) for t in s.tables)
        meta = len(s.metadata) if s.metadata else 0
        print(f"  {s.db_id}: {len(s.tables)} tables, {n_fk} foreign keys, {meta} evidence sentences")
    atomic_write_text(args.out, save_repository(repo))
    print(f"{len(repo)} databases ingested")
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    cfg = _config(args, repository=args.repository, questions=args.questions)
    repo = _load_repo(cfg)
    samples = load_questions([_require(q, "questions file") for q in cfg.questions])
    known = {s.db_id for s in repo}
    unknown = sorted({s.gold_db_id for s in samples} - known)
    if unknown:
        raise UsageError(f"questions name unknown databases: {', '.join(unknown)}")
    train, test = build_route_split(samples, cfg.seed)
    dataset = RoutingDataset(tuple(repo), tuple(train), tuple(test))
    if args.cross_domain:
        dataset = make_cross_domain(dataset, args.cross_domain.split(","))
    manifest = split_manifest(cfg.seed, dataset.train, dataset.test)
    if dataset.cross_domain_db_ids:
        manifest["cross_domain_db_ids"] = sorted(dataset.cross_domain_db_ids)
    atomic_write_text(args.out, json.dumps(manifest, indent=1) + "\n")
    stats = dataset_stats(dataset)
    print(f"databases {stats['databases']}  train {stats['train_questions']}  test {stats['test_questions']}  "
          f"total {stats['total_questions']}  odd-count databases {stats['odd_count_databases']}")
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    extra: dict[str, Any] = {"repository": args.repository}
    if args.no_metadata:
        extra["include_metadata"] = False
    if args.document_style:
        extra["document_style"] = args.document_style
    cfg = _config(args, **extra)
    repo = _load_repo(cfg)
    index = build_index(repo, make_embedder(cfg), cfg.include_metadata, cfg.document_style)
    index.save(args.out)
    print(f"indexed {len(index.db_ids)} databases with {index.model_id}")
    return EXIT_OK


def _router(cfg: PipelineConfig) -> Router:
    repo = _load_repo(cfg)
    index = _load_index(cfg)
    embedder = make_embedder(cfg)
    if embedder.model_id != index.model_id:
        raise UsageError(f"index was built with {index.model_id}, configured embedder is {embedder.model_id}")
    if not index.include_metadata:
        repo = [s.without_metadata() for s in repo]
    try:
        return Router(repo, index, embedder, make_reasoner(cfg), cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_route(args: argparse.Namespace) -> int:
    cfg = _config(args, repository=args.repository, index=args.index, mode=args.mode, k=args.k)
    router = _router(cfg)
    ranked = router.route(args.question, "cli")
    for rank, (db, score) in enumerate(ranked.items, start=1):
        detail = ranked.details.get(db)
        if detail is not None and hasattr(detail, "coverage"):
            print(f"{rank:>3}  {db}  total={score:.6f}  coverage={detail.coverage:.6f}  "
                  f"connectivity={detail.connectivity}  semantic={detail.semantic:.6f}")
        else:
            print(f"{rank:>3}  {db}  score={score:.6f}")
    if args.explain:
        dump = {db: d.to_dict() for db, d in ranked.details.items() if hasattr(d, "to_dict")}
        print(json.dumps(dump, indent=1, sort_keys=True))
    failed = [f"{db}: {d.error}" for db, d in ranked.details.items() if getattr(d, "error", None)]
    for line in failed:
        print(f"provider error: {line}", file=sys.stderr)
    return EXIT_PROVIDER if failed else EXIT_OK


def _write_report(report: EvalReport, out: str, fmt: str) -> list[str]:
    written = []
    if fmt in ("json", "both"):
        atomic_write_text(f"{out}.json", report.to_json())
        written.append(f"{out}.json")
    if fmt in ("csv", "both"):
        atomic_write_text(f"{out}.csv", report.to_csv())
        written.append(f"{out}.csv")
    return written


def _summary(report: EvalReport) -> str:
    agg = report.aggregates
    return "  ".join(f"{k}={v:.4f}" for k, v in agg.items()) + f"  candidate_misses={report.candidate_misses}"


def cmd_evaluate(args: argparse.Namespace) -> int:
    extra: dict[str, Any] = {
        "repository": args.repository,
        "index": args.index,
        "questions": args.questions,
        "split": args.split,
        "mode": args.mode,
        "k": args.k,
    }
    if args.oracle_injection:
        extra["oracle_injection"] = True
    cfg = _config(args, **extra)
    samples = load_questions([_require(q, "questions file") for q in cfg.questions])
    with open(_require(cfg.split, "split manifest"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    train, test = apply_manifest(samples, manifest)
    test = {"test": test, "train": train, "all": train + test}[args.subset]
    if not test:
        raise UsageError(f"the {args.subset} split is empty")
    router = _router(cfg)
    if args.ablate_metadata:
        result = ablate_metadata(_load_repo(cfg), test, cfg, router.embedder, router.reasoner)
        for label in ("with_metadata", "without_metadata"):
            result[label].config["pipeline"] = cfg.to_dict()
            _write_report(result[label], f"{args.out}.{label}", args.format)
            print(f"{label}: {_summary(result[label])}")
        atomic_write_text(f"{args.out}.delta.json", json.dumps(result["delta"], indent=1, sort_keys=True) + "\n")
        return EXIT_OK
    report = run_evaluation(router, test, explain=args.explain)
    report.config["pipeline"] = cfg.to_dict()
    for path in _write_report(report, args.out, args.format):
        print(f"wrote {path}")
    print(_summary(report))
    if report.errors:
        print(f"provider errors on {len(report.errors)} queries; see the JSON report", file=sys.stderr)
        return EXIT_PROVIDER
    return EXIT_OK


def cmd_analyze_clusters(args: argparse.Namespace) -> int:
    cfg = _config(args, index=args.index)
    index = _load_index(cfg)
    vectors = {db: vec for db, (_, vec) in index.entries.items()}
    try:
        clusters = constrained_kmeans(vectors, args.clusters, args.min_size, args.max_size, seed=cfg.seed)
    except InfeasibleBounds as exc:
        raise UsageError(str(exc)) from exc
    out: dict[str, Any] = {"clusters": clusters.to_dict()}
    if args.report:
        with open(_require(args.report, "evaluation report"), encoding="utf-8") as fh:
            doc = json.load(fh)
        records = [QueryRecord(r["query_id"], r["gold_db_id"], tuple(r["ranked"])) for r in doc["records"]]
        out["confusion"] = intra_cluster_confusion(records, clusters)
    atomic_write_text(args.out, json.dumps(out, indent=1, sort_keys=True) + "\n")
    print("cluster sizes: " + ", ".join(str(s) for s in clusters.sizes))
    if "confusion" in out:
        c = out["confusion"]
        print(f"errors {c['errors']}  top1 same cluster {c['top1_same_cluster']:.4f}  "
              f"2+ same-cluster in top-5 {c['multi_same_cluster_top5']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbroute", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--replay", metavar="TRANSCRIPT", help="answer reasoning prompts from a recorded transcript")
    parser.add_argument("--record", metavar="TRANSCRIPT", help="record reasoning calls to a transcript")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate catalogs and write a repository file")
    p.add_argument("--catalog", action="extend", nargs="+", help="tables.json-style catalog (repeatable)")
    p.add_argument("--ddl", action="extend", nargs="+", help="CREATE TABLE script, db_id taken from the file name (repeatable)")
    p.add_argument("--metadata-root", help="directory holding <db_id>/database_description/*.csv")
    p.add_argument("--questions", action="extend", nargs="+", help="question files whose evidence is merged per database")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="seeded per-database 50-50 question split")
    p.add_argument("--repository")
    p.add_argument("--questions", action="extend", nargs="+")
    p.add_argument("--cross-domain", help="comma-separated db_ids whose questions leave the train split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("index", help="embed schema documents")
    p.add_argument("--repository")
    p.add_argument("--no-metadata", action="store_true")
    p.add_argument("--document-style", choices=("ddl", "compact"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    def stage_flags(q: argparse.ArgumentParser) -> None:
        q.add_argument("--repository")
        q.add_argument("--index")
        q.add_argument("--mode", choices=MODES)
        q.add_argument("--k", type=int)
        q.add_argument("--reasoner", choices=("none", "http", "lexical"))
        q.add_argument("--explain", action="store_true")

    p = sub.add_parser("route", help="rank databases for one question")
    p.add_argument("question")
    stage_flags(p)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("evaluate", help="route the test split and write a report")
    stage_flags(p)
    p.add_argument("--questions", action="extend", nargs="+")
    p.add_argument("--split")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test", help="which part of the split to route")
    p.add_argument("--oracle-injection", action="store_true", help="force the gold database into the candidates")
    p.add_argument("--ablate-metadata", action="store_true", help="also run without metadata and report deltas")
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-clusters", help="size-constrained clustering of schema embeddings")
    p.add_argument("--index")
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--min-size", type=int, required=True)
    p.add_argument("--max-size", type=int, required=True)
    p.add_argument("--report", help="evaluation JSON for the confusion statistics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_clusters)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, SchemaError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ReasonerError, ProviderError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())

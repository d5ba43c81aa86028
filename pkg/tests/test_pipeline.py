import json

import pytest

from dbroute.corpus import EvidenceSet, QuerySample, attach_evidence
from dbroute.ddl import parse_ddl
from dbroute.embeddings import CachedEmbedder, HashingEmbedder
from dbroute.mock import LexicalReasoner
from dbroute.reasoner import ReasonerFormatError, ScriptedReasoner, TranscriptProvider
from dbroute.retrieval import build_index
from dbroute.pipeline import PipelineConfig, Router, ablate_metadata, make_embedder, make_reasoner, run_evaluation

REPO = {
    "music": "CREATE TABLE singer (singer_id INT PRIMARY KEY, singer_name TEXT, country TEXT);",
    "books": "CREATE TABLE book (book_id INT PRIMARY KEY, title TEXT, author TEXT);",
    "flights": "CREATE TABLE flight (flight_id INT PRIMARY KEY, origin TEXT, destination TEXT);",
    "zoo": "CREATE TABLE enclosure (enc_id INT PRIMARY KEY, area REAL);",
}


@pytest.fixture
def repo():
    return [parse_ddl(ddl, db) for db, ddl in REPO.items()]


def make_router(repo, mode="retrieval", reasoner=None, **kw):
    cfg = PipelineConfig(mode=mode, embedder={"kind": "hashing", "dimension": 256}, **kw)
    emb = make_embedder(cfg)
    return Router(repo, build_index(repo, emb), emb, reasoner, cfg)


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"k": 7, "n": 2.0}))
    env = {"DBROUTE_K": "3", "DBROUTE_N": "4", "DBROUTE_SEED": "9", "DBROUTE_ALLOW_STEINER_TABLES": "false"}
    cfg = PipelineConfig.resolve(cfg_file, {"k": 2, "mode": None}, env)
    assert (cfg.k, cfg.n, cfg.seed, cfg.allow_steiner_tables) == (2, 2.0, 9, False)
    assert cfg.mode == "modular-rerank"
    assert PipelineConfig.resolve(environ={}).k == 5


def test_config_rejects_bad_values(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ValueError):
        PipelineConfig.resolve(cfg_file, environ={})
    with pytest.raises(ValueError):
        PipelineConfig.resolve(overrides={"bogus": 1}, environ={})
    for bad in ({"mode": "x"}, {"k": 0}, {"n": 0.2}, {"graph_source": "x"}, {"zero_phrase_policy": "x"}):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


def test_factories(tmp_path):
    cfg = PipelineConfig(cache_dir=str(tmp_path), reasoner={"kind": "lexical"}, record=str(tmp_path / "t.jsonl"))
    assert isinstance(make_embedder(cfg), CachedEmbedder)
    rec = make_reasoner(cfg)
    assert isinstance(rec, TranscriptProvider) and rec.mode == "record"
    assert make_reasoner(PipelineConfig()) is None
    with pytest.raises(ValueError):
        make_reasoner(PipelineConfig(reasoner={"kind": "psychic"}))
    with pytest.raises(ValueError):
        make_embedder(PipelineConfig(embedder={"kind": "psychic"}))


def test_rerank_mode_needs_reasoner(repo):
    with pytest.raises(ValueError, match="needs a reasoner"):
        make_router(repo, mode="modular-rerank")


def test_index_repository_mismatch(repo):
    cfg = PipelineConfig(mode="retrieval")
    emb = make_embedder(cfg)
    with pytest.raises(ValueError, match="disagree"):
        Router(repo[:2], build_index(repo, emb), emb, None, cfg)


def test_oracle_injection_adds_gold(repo):
    router = make_router(repo, k=1)
    cands, hit = router.candidates("singer country", "q", gold="zoo")
    assert not hit and cands.db_ids == ["music"]
    router = make_router(repo, k=1, oracle_injection=True)
    cands, hit = router.candidates("singer country", "q", gold="zoo")
    assert not hit and cands.db_ids == ["zoo"]
    router = make_router(repo, k=2, oracle_injection=True)
    cands, _ = router.candidates("singer country", "q", gold="zoo")
    assert cands.db_ids == ["music", "zoo"]


def test_graph_sources(repo):
    garbage = ScriptedReasoner(default="no idea")
    router = make_router(repo, "modular-rerank", garbage, graph_source="llm-fallback")
    assert router.graph("music").n_tables == 1
    router = make_router(repo, "modular-rerank", garbage, graph_source="llm")
    with pytest.raises(ReasonerFormatError):
        router.graph("music")
    router = make_router(repo, "modular-rerank", ScriptedReasoner(default="{0: {}}"), graph_source="llm")
    assert router.graph("books") is router.graph("books")


def test_run_evaluation_modes(repo):
    samples = [
        QuerySample("q1", "Which singer is from which country?", "music"),
        QuerySample("q2", "List the title and author of each book.", "books"),
    ]
    for mode in ("retrieval", "direct-rerank", "modular-rerank"):
        router = make_router(repo, mode, LexicalReasoner(), k=3)
        report = run_evaluation(router, samples, explain=True)
        assert report.aggregates["recall@1"] == 1.0
        assert report.config["stage"] == mode.replace("-", "_")
        assert not report.errors
    assert set(report.explanations) == {"q1", "q2"}
    with pytest.raises(ValueError):
        run_evaluation(router, [])


def test_run_evaluation_records_errors(repo):
    def reply(prompt):
        raise_for = "Database: books"
        if raise_for in prompt and "You link phrases" in prompt:
            from dbroute.embeddings import ProviderError

            raise ProviderError("offline")
        return LexicalReasoner().complete(prompt)

    router = make_router(repo, "modular-rerank", ScriptedReasoner(default=reply), k=4, parallelism=2)
    report = run_evaluation(router, [QuerySample("q1", "singer country", "music")])
    assert list(report.errors) == ["q1"]
    assert report.errors["q1"][0].startswith("books: ProviderError")


def test_ablation_without_metadata_has_zero_delta(repo):
    samples = [QuerySample("q1", "singer country", "music"), QuerySample("q2", "book title", "books")]
    out = ablate_metadata(repo, samples, PipelineConfig(mode="retrieval"), HashingEmbedder(128), None)
    assert all(v == 0 for v in out["delta"].values())


def test_ablation_evidence_only_database(repo):
    # "zoo" shares no words with the question; only its evidence mentions flamingos
    repo = attach_evidence(repo, {"zoo": EvidenceSet(("flamingo feeding happens in each enclosure area",))})
    samples = [QuerySample("q1", "When are the flamingo feeding times?", "zoo")]
    out = ablate_metadata(repo, samples, PipelineConfig(mode="retrieval"), HashingEmbedder(256), None)
    assert out["with_metadata"].aggregates["recall@1"] == 1.0
    assert out["without_metadata"].aggregates["recall@1"] < 1.0
    assert out["delta"]["recall@1"] > 0

"""LLM-backed reasoning steps: join-graph inference, phrase-to-column mapping, direct re-ranking.

Every LLM interaction goes through a :class:`ReasonerProvider`.  Responses
are parsed strictly; parsers either return validated structures or raise a
:class:`ReasonerFormatError` subclass, and the three tasks retry with an
appended format reminder before giving up.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from dbroute.embeddings import ProviderError
from dbroute.retrieval import RankedList
from dbroute.schema import DatabaseSchema, SchemaGraph, serialize_schema_document

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
FORMAT_REMINDER = "Reminder: answer strictly in the requested output format, with no other text."


class ReasonerError(RuntimeError):
    pass


class ReasonerFormatError(ReasonerError):
    """The response could not be parsed into the expected structure."""


class MembershipError(ReasonerFormatError):
    """The response named a database outside the candidate set."""


class MissingRecordingError(ReasonerError):
    pass


# ---------------------------------------------------------------------------
# providers


class ReasonerProvider(ABC):
    model_id: str

    @abstractmethod
    def complete(self, prompt: str, *, temperature: float = 0.0, max_tokens: int = 1024) -> str:
        ...


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ScriptedReasoner(ReasonerProvider):
    """Deterministic test double.

    ``rules`` is a sequence of ``(needle, reply)`` pairs: the first rule whose
    needle (a substring, or a compiled regex) occurs in the prompt answers.
    A reply may be a string or a callable taking the prompt.
    """

    def __init__(
        self,
        rules: Sequence[tuple[str | re.Pattern[str], str | Callable[[str], str]]] = (),
        default: str | Callable[[str], str] | None = None,
        model_id: str = "scripted",
    ):
        self.rules = list(rules)
        self.default = default
        self.model_id = model_id
        self.calls: list[str] = []

    def complete(self, prompt: str, *, temperature: float = 0.0, max_tokens: int = 1024) -> str:
        self.calls.append(prompt)
        for needle, reply in self.rules:
            hit = needle.search(prompt) if isinstance(needle, re.Pattern) else needle in prompt
            if hit:
                return reply(prompt) if callable(reply) else reply
        if self.default is None:
            raise ReasonerError("scripted reasoner has no rule for this prompt")
        return self.default(prompt) if callable(self.default) else self.default


class HttpReasoner(ReasonerProvider):
    """Chat-completions style client (``{"model", "messages", "temperature", "max_tokens"}``)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        token_env: str | None = "DBROUTE_LLM_TOKEN",
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model_id = model
        self.token_env = token_env
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, prompt: str, *, temperature: float = 0.0, max_tokens: int = 1024) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        try:
            resp = self._client.post(self.endpoint, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise ProviderError(f"LLM request timed out: {exc}", retryable=True) from exc
        except httpx.TransportError as exc:
            raise ProviderError(f"LLM transport error: {exc}", retryable=True) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"LLM service returned {resp.status_code}", retryable=True)
        if resp.status_code >= 400:
            raise ProviderError(f"LLM service returned {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            if "choices" in body:
                return body["choices"][0]["message"]["content"]
            return body["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError("unrecognised LLM response body") from exc


class TranscriptProvider(ReasonerProvider):
    """Record/replay wrapper around a provider.

    The transcript is append-only JSON lines of
    ``{"prompt_sha256", "model_id", "response"}``.  In ``record`` mode
    prompts already present are served from the transcript and new ones are
    forwarded to ``inner`` and appended.  In ``replay`` mode a prompt with no
    recording is an error.
    """

    def __init__(
        self,
        path: Path | str,
        mode: str = "replay",
        inner: ReasonerProvider | None = None,
        model_id: str | None = None,
    ):
        if mode not in ("record", "replay"):
            raise ValueError("mode must be 'record' or 'replay'")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs an inner provider")
        self.path = Path(path)
        self.mode = mode
        self.inner = inner
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        models: set[str] = set()
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._entries[row["prompt_sha256"]] = row["response"]
                        models.add(row.get("model_id", ""))
        elif mode == "replay":
            raise MissingRecordingError(f"transcript {self.path} does not exist")
        if inner is not None:
            self.model_id = inner.model_id
        elif model_id is not None:
            self.model_id = model_id
        else:
            self.model_id = models.pop() if len(models) == 1 else "replay"
        self.live_calls = 0

    def __len__(self) -> int:
        return len(self._entries)

    def complete(self, prompt: str, *, temperature: float = 0.0, max_tokens: int = 1024) -> str:
        key = prompt_sha256(prompt)
        with self._lock:
            if key in self._entries:
                return self._entries[key]
        if self.mode == "replay":
            raise MissingRecordingError(f"no recorded response for prompt {key[:12]}")
        assert self.inner is not None
        response = self.inner.complete(prompt, temperature=temperature, max_tokens=max_tokens)
        with self._lock:
            self.live_calls += 1
            if key not in self._entries:
                self._entries[key] = response
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    row = {"prompt_sha256": key, "model_id": self.model_id, "response": response}
                    fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        return response


# ---------------------------------------------------------------------------
# prompt templates


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    body: str

    def render(self, **values: str) -> str:
        text = self.body
        for key, value in values.items():
            text = text.replace("{" + key + "}", value)
        return text


def load_template(name: str, directory: Path | str | None = None) -> PromptTemplate:
    if directory is not None:
        raw = (Path(directory) / f"{name}.txt").read_text(encoding="utf-8")
    else:
        raw = resources.files("dbroute").joinpath("prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    version = "0"
    lines = raw.splitlines()
    if lines and lines[0].startswith("# version:"):
        version = lines[0].split(":", 1)[1].strip()
        lines = lines[1:]
    return PromptTemplate(name, version, "\n".join(lines).rstrip("\n") + "\n")


def _metadata_block(schema: DatabaseSchema) -> str:
    if schema.metadata:
        return "Domain knowledge:\n" + schema.metadata.text() + "\n"
    return ""


def _with_retries(
    provider: ReasonerProvider,
    prompt: str,
    parse: Callable[[str], Any],
    retries: int,
    max_tokens: int = 1024,
) -> Any:
    """Call, parse, and on a format violation retry with a reminder appended.

    Retryable provider errors are retried with the unchanged prompt.
    """
    attempt_prompt = prompt
    last: Exception | None = None
    for attempt in range(max(1, retries)):
        try:
            response = provider.complete(attempt_prompt, temperature=0.0, max_tokens=max_tokens)
        except ProviderError as exc:
            if not exc.retryable:
                raise
            last = exc
            log.warning("attempt %d: %s", attempt + 1, exc)
            continue
        try:
            return parse(response)
        except ReasonerFormatError as exc:
            last = exc
            log.warning("attempt %d: %s", attempt + 1, exc)
            attempt_prompt = f"{prompt}\n{FORMAT_REMINDER}"
    assert last is not None
    raise last


# ---------------------------------------------------------------------------
# step 1: join graph


_ADJ_ENTRY_RE = re.compile(r"""["']?(\d+)["']?\s*:\s*[\{\[]([^\{\}\[\]]*)[\}\]]""")


def _outer_braces(text: str) -> str | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def parse_adjacency(text: str, schema: DatabaseSchema) -> SchemaGraph:
    """Parse ``{0: {1, 2}, 1: {0}}`` into a symmetric join graph.

    Neighbours may be given by number or by table name.  Missing keys mean no
    neighbours; self-loops are dropped.
    """
    block = _outer_braces(text)
    if block is None:
        raise ReasonerFormatError("no adjacency list found in response")
    n = len(schema.tables)
    entries = _ADJ_ENTRY_RE.findall(block[1:-1])
    if not entries and block.strip("{} \n\t"):
        raise ReasonerFormatError("adjacency list has no parseable entries")
    edges = []
    for key, body in entries:
        i = int(key)
        if not 0 <= i < n:
            raise ReasonerFormatError(f"table index {i} out of range for {n} tables")
        for raw in re.split(r"[,;]", body):
            tok = raw.strip().strip("\"'` ")
            if not tok:
                continue
            if tok.lstrip("-").isdigit():
                j = int(tok)
            else:
                found = schema.table_index(tok)
                if found is None:
                    raise ReasonerFormatError(f"unknown neighbour {tok!r} for table {i}")
                j = found
            if not 0 <= j < n:
                raise ReasonerFormatError(f"neighbour {j} out of range for {n} tables")
            if i == j:
                log.warning("%s: dropping self-loop on table %d", schema.db_id, i)
                continue
            edges.append((i, j))
    return SchemaGraph.from_edges(schema.db_id, n, edges)


def join_graph_prompt(schema: DatabaseSchema, template: PromptTemplate | None = None) -> str:
    template = template or load_template("join_graph")
    tables = "\n".join(
        f"{i}: {t.name}({', '.join(c.name for c in t.columns)})" for i, t in enumerate(schema.tables)
    )
    return template.render(
        TABLES=tables,
        SCHEMA=serialize_schema_document(schema, include_metadata=True),
        METADATA=_metadata_block(schema),
    )


def infer_join_adjacency(
    schema: DatabaseSchema,
    provider: ReasonerProvider,
    retries: int = DEFAULT_RETRIES,
    template: PromptTemplate | None = None,
) -> SchemaGraph:
    return _with_retries(
        provider, join_graph_prompt(schema, template), lambda r: parse_adjacency(r, schema), retries
    )


# ---------------------------------------------------------------------------
# step 2: phrase mapping


class _NotMapped:
    _instance: _NotMapped | None = None

    def __new__(cls) -> _NotMapped:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NOT_MAPPED"

    def __reduce__(self) -> str:
        return "NOT_MAPPED"


NOT_MAPPED = _NotMapped()


@dataclass(frozen=True)
class Candidate:
    table: str
    column: str
    table_index: int
    column_index: int
    kind: str = "column"  # column | value

    @property
    def label(self) -> str:
        return f"{self.table}.{self.column}"


@dataclass(frozen=True)
class PhraseMapping:
    phrase: str
    candidates: tuple[Candidate | _NotMapped, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ValueError("a phrase mapping needs at least one candidate")
        if NOT_MAPPED in self.candidates and len(self.candidates) > 1:
            raise ValueError("NOT_MAPPED must be the only candidate")

    @property
    def mapped(self) -> bool:
        return self.candidates != (NOT_MAPPED,)

    @property
    def columns(self) -> list[Candidate]:
        return [c for c in self.candidates if isinstance(c, Candidate)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "phrase": self.phrase,
            "candidates": [
                {"table": c.table, "column": c.column, "kind": c.kind} if isinstance(c, Candidate) else "N/A"
                for c in self.candidates
            ],
        }


_NA_WORDS = {"n/a", "na", "none", "null", "not mapped", "unmapped", "-"}
_ARROW_RE = re.compile(r"\s*(?:->|→|=>)\s*")
_KIND_RE = re.compile(r"\s*[\(\[](value|column)[\)\]]\s*$", re.IGNORECASE)
_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")


def _norm_ws(text: str) -> str:
    return " ".join(text.split())


def _strip_quotes(text: str) -> str:
    text = text.strip()
    while len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'`":
        text = text[1:-1].strip()
    return text


def _resolve_target(target: str, schema: DatabaseSchema) -> Candidate | None:
    target = target.strip().rstrip(".;,")
    attempts = [(target, "column")]
    m = _KIND_RE.search(target)
    if m:
        attempts.insert(0, (target[: m.start()], m.group(1).lower()))
    for text, kind in attempts:
        # try every '.', since quoted names may contain dots
        for pos in [i for i, ch in enumerate(text) if ch == "."]:
            ref = schema.resolve(_strip_quotes(text[:pos]), _strip_quotes(text[pos + 1 :]))
            if ref is not None:
                t = schema.tables[ref.table_index]
                return Candidate(t.name, t.columns[ref.column_index].name, ref.table_index, ref.column_index, kind)
    return None


def parse_phrase_mappings(text: str, query: str, schema: DatabaseSchema) -> list[PhraseMapping]:
    """Parse ``phrase -> Table.Column`` / ``phrase -> N/A`` lines.

    Lines for the same phrase merge.  Phrases that do not occur in the query
    and unparseable lines are skipped with a warning; a response with
    content but no parseable line is a format error.  Unknown columns are
    dropped, and a phrase left without any column becomes NOT_MAPPED.
    """
    query_norm = _norm_ws(query).lower()
    order: list[str] = []
    display: dict[str, str] = {}
    targets: dict[str, list[Candidate]] = {}
    parsed_any = False
    content_lines = 0
    for raw_line in text.splitlines():
        line = _BULLET_RE.sub("", raw_line.strip().strip("`")).strip()
        if not line:
            continue
        content_lines += 1
        parts = _ARROW_RE.split(line, maxsplit=1)
        if len(parts) != 2 or not parts[0].strip():
            log.warning("%s: skipping unparseable mapping line %r", schema.db_id, raw_line)
            continue
        parsed_any = True
        phrase = _norm_ws(_strip_quotes(parts[0]))
        key = phrase.lower()
        if key not in query_norm:
            log.warning("%s: phrase %r does not occur in the query", schema.db_id, phrase)
            continue
        if key not in targets:
            order.append(key)
            display[key] = phrase
            targets[key] = []
        rhs = parts[1].strip()
        if rhs.lower().strip(" .") in _NA_WORDS:
            continue
        for piece in re.split(r"\s*(?:;|\||,(?![^()]*\)))\s*", rhs):
            if not piece.strip():
                continue
            if piece.lower().strip(" .") in _NA_WORDS:
                continue
            cand = _resolve_target(piece, schema)
            if cand is None:
                log.warning("%s: dropping unknown target %r for phrase %r", schema.db_id, piece, phrase)
                continue
            if cand not in targets[key]:
                targets[key].append(cand)
    if content_lines and not parsed_any:
        raise ReasonerFormatError("no mapping line could be parsed")
    return [
        PhraseMapping(display[k], tuple(targets[k]) if targets[k] else (NOT_MAPPED,))
        for k in order
    ]


def phrase_mapping_prompt(query: str, schema: DatabaseSchema, template: PromptTemplate | None = None) -> str:
    template = template or load_template("phrase_mapping")
    return template.render(
        QUERY=query,
        SCHEMA=serialize_schema_document(schema, include_metadata=True),
        METADATA=_metadata_block(schema),
    )


def map_query_phrases(
    query: str,
    schema: DatabaseSchema,
    provider: ReasonerProvider,
    retries: int = DEFAULT_RETRIES,
    template: PromptTemplate | None = None,
) -> list[PhraseMapping]:
    return _with_retries(
        provider,
        phrase_mapping_prompt(query, schema, template),
        lambda r: parse_phrase_mappings(r, query, schema),
        retries,
    )


# ---------------------------------------------------------------------------
# direct re-ranking baseline


@dataclass(frozen=True)
class DirectRerankResult:
    query_id: str
    top3: tuple[str, ...]

    def to_ranked_list(self) -> RankedList:
        items = tuple((db, 1.0 / rank) for rank, db in enumerate(self.top3, start=1))
        return RankedList(self.query_id, items, "direct_rerank")


_OUTPUT_RE = re.compile(r"^\s*\**\s*Q\s*\[?\s*([^\]:]*?)\s*\]?\s*:\s*(.+?)\s*$", re.IGNORECASE)


def parse_direct_rerank(text: str, query_id: str, candidates: Sequence[str], expected: int) -> DirectRerankResult:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    match = None
    for ln in lines:
        match = _OUTPUT_RE.match(ln.strip().strip("`"))
        if match:
            break
    if match is None:
        raise ReasonerFormatError("response does not contain a 'Q <id>: db, db, db' line")
    names = [_strip_quotes(x.strip().strip("[]*")) for x in match.group(2).split(",")]
    names = [n for n in names if n]
    if len(names) != expected:
        raise ReasonerFormatError(f"expected {expected} databases, got {len(names)}")
    lookup = {c.lower(): c for c in candidates}
    resolved = []
    for name in names:
        if name.lower() not in lookup:
            raise MembershipError(f"{name!r} is not one of the candidate databases")
        resolved.append(lookup[name.lower()])
    if len(set(resolved)) != len(resolved):
        raise ReasonerFormatError("re-ranked databases are not distinct")
    return DirectRerankResult(query_id, tuple(resolved))


def direct_rerank_prompt(
    query_id: str,
    question: str,
    candidates: Sequence[DatabaseSchema],
    include_metadata: bool = True,
    template: PromptTemplate | None = None,
) -> str:
    template = template or load_template("direct_rerank")
    k = len(candidates)
    n = min(3, k)
    ranking = ", ".join(f"Rank {i}: {s.db_id}" for i, s in enumerate(candidates, start=1))
    schemas = "\n".join(
        f"Schema {i}:\n{serialize_schema_document(s, include_metadata)}{_metadata_block(s) if include_metadata else ''}"
        for i, s in enumerate(candidates, start=1)
    )
    slots = ", ".join(f"[DB_{i}]" for i in range(1, n + 1))
    return template.render(
        K=str(k), N=str(n), QID=str(query_id), QUESTION=question,
        RANKING=ranking, SCHEMAS="\n" + schemas, OUTPUT_SLOTS=slots,
    )


def direct_rerank(
    query_id: str,
    question: str,
    top5: RankedList,
    schemas: Mapping[str, DatabaseSchema],
    provider: ReasonerProvider,
    retries: int = DEFAULT_RETRIES,
    include_metadata: bool = True,
    template: PromptTemplate | None = None,
) -> DirectRerankResult:
    ids = top5.db_ids
    if not ids:
        raise ValueError("direct re-ranking needs at least one candidate")
    prompt = direct_rerank_prompt(query_id, question, [schemas[d] for d in ids], include_metadata, template)
    expected = min(3, len(ids))
    return _with_retries(provider, prompt, lambda r: parse_direct_rerank(r, query_id, ids, expected), retries)


"""A deterministic, offline stand-in for the LLM behind the three reasoning prompts.

The lexical reasoner reads the schema back out of the rendered prompt and
answers by exact token matching.  It is what produced the transcripts shipped
with the toy corpus and is handy for trying the CLI without a model endpoint.
"""

from __future__ import annotations

import re

from dbroute.ddl import DDLError, parse_ddl
from dbroute.embeddings import tokenize
from dbroute.reasoner import ReasonerError, ReasonerProvider
from dbroute.schema import DatabaseSchema, build_join_graph_from_keys

STOPWORDS = frozenset(
    """
    a an the of in on at to for from by with and or not no is are was were be been being
    what which who whom whose when where why how many much list show give find return
    all each every any some their its his her them they it that this these those there
    do doe did done ha have had than then also only per into over under about between
    name number count total average most least more less than top first last
    """.split()
)

_QUESTION_RE = re.compile(r"^Question:\s*(.*)$", re.MULTILINE)
_DIRECT_RE = re.compile(r"Question (\S+): Text: (.*?); Ranking \(Top (\d+)\): (.*?); Schemas:", re.DOTALL)
_SCHEMA_SPLIT_RE = re.compile(r"^Schema \d+:\n", re.MULTILINE)


def content_tokens(text: str) -> list[tuple[str, str]]:
    """(surface form, folded token) pairs for non-stopword words of ``text``."""
    out = []
    for word in re.findall(r"[A-Za-z][A-Za-z0-9]*", text):
        folded = tokenize(word)
        if not folded or folded[0] in STOPWORDS:
            continue
        out.append((word, folded[0]))
    return out


def _schema_from_prompt(prompt: str) -> DatabaseSchema:
    try:
        return parse_ddl(prompt, strict=False)
    except DDLError as exc:
        raise ReasonerError(f"no schema found in prompt: {exc}") from exc


def link_phrases(question: str, schema: DatabaseSchema) -> list[tuple[str, list[str]]]:
    """Map each content word to every column whose name contains it.

    A word naming a table maps to that table's first primary-key column when no
    column name matches.  Unmatched words map to nothing.
    """
    seen: dict[str, list[str]] = {}
    for surface, tok in content_tokens(question):
        if surface in seen:
            continue
        targets = []
        for table in schema.tables:
            for col in table.columns:
                if tok in tokenize(col.name):
                    targets.append(f"{table.name}.{col.name}")
        if not targets:
            for table in schema.tables:
                if tok in tokenize(table.name):
                    key = table.primary_key[0] if table.primary_key else 0
                    targets.append(f"{table.name}.{table.columns[key].name}")
        seen[surface] = targets
    return list(seen.items())


class LexicalReasoner(ReasonerProvider):
    model_id = "lexical-mock-1"

    def complete(self, prompt: str, *, temperature: float = 0.0, max_tokens: int = 1024) -> str:
        if "joined directly" in prompt:
            return self._join_graph(prompt)
        if "You link phrases" in prompt:
            return self._phrases(prompt)
        if "You review candidate databases" in prompt:
            return self._direct(prompt)
        raise ReasonerError("lexical reasoner does not recognise this prompt")

    def _join_graph(self, prompt: str) -> str:
        graph = build_join_graph_from_keys(_schema_from_prompt(prompt), name_heuristic=True)
        body = ", ".join(
            f"{i}: {{{', '.join(str(j) for j in sorted(graph.adjacency[i]))}}}" for i in range(graph.n_tables)
        )
        return "{" + body + "}"

    def _phrases(self, prompt: str) -> str:
        match = _QUESTION_RE.search(prompt)
        if match is None:
            raise ReasonerError("prompt has no question line")
        question = match.group(1).strip()
        schema = _schema_from_prompt(prompt.split("Schema:", 1)[-1])
        lines = []
        for phrase, targets in link_phrases(question, schema):
            if targets:
                lines.extend(f"{phrase} -> {t}" for t in targets)
            else:
                lines.append(f"{phrase} -> N/A")
        return "\n".join(lines)

    def _direct(self, prompt: str) -> str:
        match = _DIRECT_RE.search(prompt)
        if match is None:
            raise ReasonerError("malformed re-ranking prompt")
        qid, question, k = match.group(1), match.group(2), int(match.group(3))
        ranking = re.findall(r"Rank \d+: (\S+?)(?:,|$)", match.group(4))
        chunks = _SCHEMA_SPLIT_RE.split(prompt.split("Schemas:", 1)[1])[1:]
        words = {tok for _, tok in content_tokens(question)}
        overlap = []
        for rank, (db, chunk) in enumerate(zip(ranking, chunks)):
            overlap.append((-len(words & set(tokenize(chunk))), rank, db))
        picked = [db for _, _, db in sorted(overlap)[: min(3, k)]]
        return f"Q {qid}: " + ", ".join(picked)

"""A small CREATE TABLE parser for the SQLite/ANSI subset found in Spider and BIRD dumps.

Only ``CREATE TABLE`` statements are interpreted.  Other statements and any
free text between statements (for example the header lines of a serialized
schema document) are skipped.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from dbroute.schema import ColumnMeta, ColumnRef, DatabaseSchema, ForeignKey, SchemaError, TableMeta

log = logging.getLogger(__name__)

_CREATE_RE = re.compile(
    r"\bCREATE\s+(?:(?:TEMP|TEMPORARY)\s+)?TABLE\b", re.IGNORECASE
)

# keywords that end a column's type and start its constraints
_COLUMN_CONSTRAINT_WORDS = {
    "CONSTRAINT", "PRIMARY", "NOT", "NULL", "UNIQUE", "CHECK", "DEFAULT",
    "COLLATE", "REFERENCES", "GENERATED", "AS", "AUTOINCREMENT", "AUTO_INCREMENT",
}
_IDENT_RE = re.compile(r"[A-Za-z_\u00c0-\uffff][\w$\u00c0-\uffff]*")
_NUMBER_RE = re.compile(r"[+-]?\d+(?:\.\d*)?(?:[eE][+-]?\d+)?")
_TABLE_CONSTRAINT_WORDS = {"CONSTRAINT", "PRIMARY", "UNIQUE", "CHECK", "FOREIGN", "KEY", "INDEX"}


class DDLError(SchemaError):
    def __init__(self, message: str, position: int | None = None, script: str | None = None):
        self.position = position
        self.line = self.column = None
        if position is not None and script is not None:
            self.line = script.count("\n", 0, position) + 1
            self.column = position - (script.rfind("\n", 0, position) + 1) + 1
            message = f"line {self.line}, column {self.column}: {message}"
        super().__init__(message)


@dataclass
class _Token:
    kind: str  # ident, qident, number, string, punct
    value: str
    start: int
    end: int

    @property
    def upper(self) -> str:
        return self.value.upper() if self.kind == "ident" else ""


class _Lexer:
    def __init__(self, text: str, pos: int):
        self.text = text
        self.pos = pos

    def _skip_trivia(self) -> None:
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            if ch.isspace():
                self.pos += 1
            elif text.startswith("--", self.pos):
                nl = text.find("\n", self.pos)
                self.pos = len(text) if nl < 0 else nl + 1
            elif text.startswith("/*", self.pos):
                end = text.find("*/", self.pos + 2)
                if end < 0:
                    raise DDLError("unterminated comment", self.pos, text)
                self.pos = end + 2
            else:
                return

    def next(self) -> _Token | None:
        self._skip_trivia()
        text, start = self.text, self.pos
        if start >= len(text):
            return None
        ch = text[start]
        closers = {'"': '"', "`": "`", "[": "]", "'": "'"}
        if ch in closers:
            close = closers[ch]
            i = start + 1
            buf = []
            while True:
                if i >= len(text):
                    raise DDLError("unterminated quoted token", start, text)
                if text[i] == close:
                    if close != "]" and text.startswith(close * 2, i):
                        buf.append(close)
                        i += 2
                        continue
                    break
                buf.append(text[i])
                i += 1
            self.pos = i + 1
            return _Token("string" if ch == "'" else "qident", "".join(buf), start, self.pos)
        m = _IDENT_RE.match(text, start)
        if m:
            self.pos = m.end()
            return _Token("ident", m.group(), start, self.pos)
        m = _NUMBER_RE.match(text, start)
        if m:
            self.pos = m.end()
            return _Token("number", m.group(), start, self.pos)
        self.pos = start + 1
        return _Token("punct", ch, start, self.pos)


class _StatementParser:
    def __init__(self, script: str, pos: int):
        self.script = script
        self.lexer = _Lexer(script, pos)
        self.peeked: _Token | None = None

    # token helpers
    def peek(self) -> _Token | None:
        if self.peeked is None:
            self.peeked = self.lexer.next()
        return self.peeked

    def take(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise DDLError("unexpected end of script", len(self.script), self.script)
        self.peeked = None
        return tok

    def error(self, message: str, tok: _Token | None = None) -> DDLError:
        pos = tok.start if tok is not None else self.lexer.pos
        return DDLError(message, pos, self.script)

    def at_word(self, *words: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.upper in words

    def at_punct(self, ch: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "punct" and tok.value == ch

    def expect_word(self, word: str) -> _Token:
        tok = self.take()
        if tok.upper != word:
            raise self.error(f"expected {word}, found {tok.value!r}", tok)
        return tok

    def expect_punct(self, ch: str) -> _Token:
        tok = self.take()
        if tok.kind != "punct" or tok.value != ch:
            raise self.error(f"expected {ch!r}, found {tok.value!r}", tok)
        return tok

    def identifier(self, what: str = "identifier") -> str:
        tok = self.take()
        if tok.kind in ("ident", "qident", "string"):
            return tok.value
        raise self.error(f"expected {what}, found {tok.value!r}", tok)

    def qualified_name(self) -> str:
        name = self.identifier("table name")
        while self.at_punct("."):
            self.take()
            name = self.identifier("table name")
        return name

    def skip_balanced(self) -> None:
        """Consume a parenthesised group, starting at '('."""
        self.expect_punct("(")
        depth = 1
        while depth:
            tok = self.take()
            if tok.kind == "punct" and tok.value == "(":
                depth += 1
            elif tok.kind == "punct" and tok.value == ")":
                depth -= 1

    def name_list(self) -> list[str]:
        self.expect_punct("(")
        names = [self.identifier("column name")]
        self._skip_order()
        while self.at_punct(","):
            self.take()
            names.append(self.identifier("column name"))
            self._skip_order()
        self.expect_punct(")")
        return names

    def _skip_order(self) -> None:
        if self.at_word("COLLATE"):
            self.take()
            self.take()
        if self.at_word("ASC", "DESC"):
            self.take()

    def skip_fk_actions(self) -> None:
        while self.at_word("ON", "MATCH", "DEFERRABLE", "NOT", "INITIALLY"):
            word = self.take().upper
            if word == "ON":
                self.take()  # DELETE / UPDATE
                action = self.take().upper
                if action in ("SET", "NO"):
                    self.take()
            elif word == "NOT":
                self.expect_word("DEFERRABLE")
            else:
                self.take()

    def references(self) -> tuple[str, list[str], _Token]:
        tok = self.expect_word("REFERENCES")
        table = self.qualified_name()
        cols: list[str] = []
        if self.at_punct("("):
            cols = self.name_list()
        self.skip_fk_actions()
        return table, cols, tok

    # grammar
    def create_table(self) -> _RawTable:
        start_tok = self.expect_word("CREATE")
        if self.at_word("TEMP", "TEMPORARY"):
            self.take()
        self.expect_word("TABLE")
        if self.at_word("IF"):
            self.take()
            self.expect_word("NOT")
            self.expect_word("EXISTS")
        name = self.qualified_name()
        if self.at_word("AS"):
            raise self.error("CREATE TABLE ... AS SELECT is not supported")
        raw = _RawTable(name=name, position=start_tok.start)
        self.expect_punct("(")
        while True:
            if self.at_word(*_TABLE_CONSTRAINT_WORDS) and not self._looks_like_column():
                self.table_constraint(raw)
            else:
                self.column_def(raw)
            tok = self.take()
            if tok.kind == "punct" and tok.value == ",":
                continue
            if tok.kind == "punct" and tok.value == ")":
                break
            raise self.error(f"expected ',' or ')', found {tok.value!r}", tok)
        # trailing table options
        while self.peek() is not None and not self.at_punct(";") and self.at_word("WITHOUT", "ROWID", "STRICT"):
            self.take()
        if self.at_punct(";"):
            self.take()
        return raw

    def _looks_like_column(self) -> bool:
        # "key INTEGER" is a column named key, "KEY (a)" is MySQL's index clause
        tok = self.peek()
        if tok is None or tok.upper not in ("KEY", "INDEX"):
            return False
        save_pos, save_peek = self.lexer.pos, self.peeked
        self.take()
        following = self.peek()
        self.lexer.pos, self.peeked = save_pos, save_peek
        return following is not None and not (following.kind == "punct" and following.value == "(")

    def column_def(self, raw: _RawTable) -> None:
        name_tok = self.peek()
        name = self.identifier("column name")
        col = _RawColumn(name=name, position=name_tok.start if name_tok else 0)
        # type: everything until a constraint keyword or top-level ',' / ')'
        type_start = type_end = None
        while True:
            tok = self.peek()
            if tok is None or (tok.kind == "punct" and tok.value in ",)"):
                break
            if tok.upper in _COLUMN_CONSTRAINT_WORDS:
                break
            if type_start is None:
                type_start = tok.start
            if tok.kind == "punct" and tok.value == "(":
                self.skip_balanced()
                type_end = self.lexer.pos  # just past ')'
            else:
                self.take()
                type_end = tok.end
        if type_start is not None and type_end is not None:
            col.data_type = " ".join(self.script[type_start:type_end].split())
        # constraints
        while True:
            tok = self.peek()
            if tok is None or (tok.kind == "punct" and tok.value in ",)"):
                break
            word = tok.upper
            if word == "CONSTRAINT":
                self.take()
                self.identifier("constraint name")
            elif word == "PRIMARY":
                self.take()
                self.expect_word("KEY")
                self._skip_order()
                if self.at_word("ON"):
                    self.take()
                    self.expect_word("CONFLICT")
                    self.take()
                if self.at_word("AUTOINCREMENT", "AUTO_INCREMENT"):
                    self.take()
                col.primary_key = True
            elif word == "REFERENCES":
                table, cols, rtok = self.references()
                col.references = (table, cols[0] if cols else None, rtok.start)
                if len(cols) > 1:
                    raise self.error("column-level REFERENCES must name at most one column", rtok)
            elif word in ("NOT", "NULL", "UNIQUE", "AUTOINCREMENT", "AUTO_INCREMENT"):
                self.take()
                if word == "NOT":
                    self.expect_word("NULL")
                if self.at_word("ON"):
                    self.take()
                    self.expect_word("CONFLICT")
                    self.take()
            elif word == "DEFAULT":
                self.take()
                if self.at_punct("("):
                    self.skip_balanced()
                else:
                    nxt = self.take()
                    if nxt.kind == "punct" and nxt.value in "+-":
                        self.take()
            elif word == "CHECK":
                self.take()
                self.skip_balanced()
            elif word == "COLLATE":
                self.take()
                self.identifier("collation")
            elif word in ("GENERATED", "AS"):
                self.take()
                if word == "GENERATED":
                    self.expect_word("ALWAYS")
                    self.expect_word("AS")
                self.skip_balanced()
                if self.at_word("STORED", "VIRTUAL"):
                    self.take()
            else:
                raise self.error(f"unexpected token {tok.value!r} in column definition", tok)
        raw.columns.append(col)

    def table_constraint(self, raw: _RawTable) -> None:
        if self.at_word("CONSTRAINT"):
            self.take()
            self.identifier("constraint name")
        tok = self.take()
        word = tok.upper
        if word == "PRIMARY":
            self.expect_word("KEY")
            raw.primary_key.extend(self.name_list())
            self.skip_conflict_clause()
        elif word == "FOREIGN":
            self.expect_word("KEY")
            local = self.name_list()
            table, cols, rtok = self.references()
            if cols and len(cols) != len(local):
                raise self.error("FOREIGN KEY column count does not match REFERENCES", rtok)
            raw.foreign_keys.append((local, table, cols, tok.start))
        elif word in ("UNIQUE", "KEY", "INDEX"):
            if self.peek() is not None and self.peek().kind in ("ident", "qident") and not self.at_punct("("):
                self.take()  # index name
            self.name_list()
            self.skip_conflict_clause()
        elif word == "CHECK":
            self.skip_balanced()
        else:
            raise self.error(f"unexpected table constraint {tok.value!r}", tok)

    def skip_conflict_clause(self) -> None:
        if self.at_word("ON"):
            self.take()
            self.expect_word("CONFLICT")
            self.take()


@dataclass
class _RawColumn:
    name: str
    position: int
    data_type: str = ""
    primary_key: bool = False
    references: tuple[str, str | None, int] | None = None


@dataclass
class _RawTable:
    name: str
    position: int

    def __post_init__(self) -> None:
        self.columns: list[_RawColumn] = []
        self.primary_key: list[str] = []
        self.foreign_keys: list[tuple[list[str], str, list[str], int]] = []


def _statement_starts(script: str) -> list[int]:
    """Offsets of CREATE TABLE keywords outside comments and string literals.

    Single-quoted literals are only honoured when closed on the same line, so
    stray apostrophes in free text do not swallow following statements.
    """
    starts = []
    i, n = 0, len(script)
    while i < n:
        if script.startswith("--", i):
            nl = script.find("\n", i)
            i = n if nl < 0 else nl + 1
            continue
        if script.startswith("/*", i):
            end = script.find("*/", i + 2)
            i = n if end < 0 else end + 2
            continue
        ch = script[i]
        if ch == "'":
            nl = script.find("\n", i)
            line_end = n if nl < 0 else nl
            close = script.find("'", i + 1, line_end)
            i = close + 1 if close >= 0 else i + 1
            continue
        if ch in "cC":
            m = _CREATE_RE.match(script, i)
            if m and (i == 0 or not (script[i - 1].isalnum() or script[i - 1] == "_")):
                starts.append(i)
                i = m.end()
                continue
        i += 1
    return starts


def parse_ddl(script: str, db_id: str = "database", strict: bool = True) -> DatabaseSchema:
    """Parse every CREATE TABLE statement in ``script`` into a schema.

    Foreign keys may reference tables declared later in the script.  A
    REFERENCES clause without a column list targets the referenced table's
    single-column primary key.  Unresolvable references raise
    :class:`DDLError`; with ``strict=False`` they are logged and dropped.
    """
    raws: list[_RawTable] = []
    for start in _statement_starts(script):
        raws.append(_StatementParser(script, start).create_table())
    if not raws:
        raise DDLError("no tables found")

    index: dict[str, int] = {}
    for i, raw in enumerate(raws):
        key = raw.name.lower()
        if key in index:
            raise DDLError(f"duplicate table name {raw.name!r}", raw.position, script)
        index[key] = i
        seen: set[str] = set()
        for col in raw.columns:
            if col.name.lower() in seen:
                raise DDLError(f"duplicate column {col.name!r} in table {raw.name!r}", col.position, script)
            seen.add(col.name.lower())

    def col_index(raw: _RawTable, name: str) -> int | None:
        for j, col in enumerate(raw.columns):
            if col.name.lower() == name.lower():
                return j
        return None

    def pk_of(raw: _RawTable) -> list[int]:
        pk = [j for j, c in enumerate(raw.columns) if c.primary_key]
        for name in raw.primary_key:
            j = col_index(raw, name)
            if j is not None and j not in pk:
                pk.append(j)
        return pk

    def unresolved(message: str, position: int) -> None:
        if strict:
            raise DDLError(message, position, script)
        log.warning("%s: %s", db_id, DDLError(message, position, script))

    tables = []
    for raw in raws:
        for name in raw.primary_key:
            if col_index(raw, name) is None:
                raise DDLError(f"PRIMARY KEY names unknown column {name!r} in {raw.name!r}", raw.position, script)
        fks: list[ForeignKey] = []
        pending = [
            ([c.name], c.references[0], [c.references[1]] if c.references[1] else [], c.references[2])
            for c in raw.columns
            if c.references
        ] + raw.foreign_keys
        for local, target_name, target_cols, pos in pending:
            ti = index.get(target_name.lower())
            if ti is None:
                unresolved(f"foreign key in {raw.name!r} references unknown table {target_name!r}", pos)
                continue
            target = raws[ti]
            if not target_cols:
                target_pk = pk_of(target)
                if len(target_pk) != len(local):
                    unresolved(
                        f"foreign key in {raw.name!r} references {target.name!r} without columns "
                        "and the primary key does not match",
                        pos,
                    )
                    continue
                target_idx: list[int | None] = list(target_pk)
            else:
                target_idx = [col_index(target, c) for c in target_cols]
            local_idx = [col_index(raw, c) for c in local]
            if None in local_idx:
                raise DDLError(f"FOREIGN KEY names unknown column in {raw.name!r}: {local}", pos, script)
            if None in target_idx:
                unresolved(f"foreign key in {raw.name!r} references unknown column {target.name}{target_cols}", pos)
                continue
            for li, tci in zip(local_idx, target_idx):
                fks.append(ForeignKey(li, ColumnRef(ti, tci)))
        tables.append(
            TableMeta(
                name=raw.name,
                columns=tuple(ColumnMeta(c.name, c.data_type) for c in raw.columns),
                primary_key=tuple(pk_of(raw)),
                foreign_keys=tuple(fks),
            )
        )
    return DatabaseSchema(db_id, tuple(tables))

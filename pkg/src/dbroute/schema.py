"""Database schema model, catalog ingestion, schema documents and join graphs."""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

if TYPE_CHECKING:
    from dbroute.corpus import EvidenceSet

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    """Raised when a schema violates a structural invariant."""


@dataclass(frozen=True)
class ColumnRef:
    table_index: int
    column_index: int


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    data_type: str = ""
    description: str | None = None
    value_description: str | None = None
    data_format: str | None = None

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise SchemaError("column name must be non-empty")

    def without_metadata(self) -> ColumnMeta:
        return ColumnMeta(self.name, self.data_type)


@dataclass(frozen=True)
class ForeignKey:
    """A single-column foreign key: local column -> target column."""

    column_index: int
    target: ColumnRef


@dataclass(frozen=True)
class TableMeta:
    name: str
    columns: tuple[ColumnMeta, ...]
    primary_key: tuple[int, ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()
    description: str | None = None

    def __post_init__(self) -> None:
        # accept lists from callers, store tuples
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "primary_key", tuple(self.primary_key))
        object.__setattr__(self, "foreign_keys", tuple(self.foreign_keys))
        if not self.name or not self.name.strip():
            raise SchemaError("table name must be non-empty")
        if not self.columns:
            raise SchemaError(f"table {self.name!r} has no columns")
        seen: set[str] = set()
        for col in self.columns:
            key = col.name.lower()
            if key in seen:
                raise SchemaError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(key)
        for idx in self.primary_key:
            if not 0 <= idx < len(self.columns):
                raise SchemaError(f"primary key index {idx} out of range in table {self.name!r}")
        for fk in self.foreign_keys:
            if not 0 <= fk.column_index < len(self.columns):
                raise SchemaError(
                    f"foreign key column index {fk.column_index} out of range in table {self.name!r}"
                )

    def column_index(self, name: str) -> int | None:
        key = name.strip().lower()
        for i, col in enumerate(self.columns):
            if col.name.lower() == key:
                return i
        return None


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[TableMeta, ...]
    metadata: EvidenceSet | None = field(default=None, compare=True)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tables", tuple(self.tables))
        if not self.db_id or not self.db_id.strip():
            raise SchemaError("db_id must be non-empty")
        if not self.tables:
            raise SchemaError(f"database {self.db_id!r} has no tables")
        seen: set[str] = set()
        for table in self.tables:
            key = table.name.lower()
            if key in seen:
                raise SchemaError(f"duplicate table {table.name!r} in database {self.db_id!r}")
            seen.add(key)
        for table in self.tables:
            for fk in table.foreign_keys:
                t = fk.target
                if not 0 <= t.table_index < len(self.tables):
                    raise SchemaError(
                        f"{self.db_id}: foreign key in {table.name!r} targets missing table {t.table_index}"
                    )
                if not 0 <= t.column_index < len(self.tables[t.table_index].columns):
                    raise SchemaError(
                        f"{self.db_id}: foreign key in {table.name!r} targets missing column "
                        f"{t.column_index} of {self.tables[t.table_index].name!r}"
                    )

    def table_index(self, name: str) -> int | None:
        key = name.strip().lower()
        for i, table in enumerate(self.tables):
            if table.name.lower() == key:
                return i
        return None

    def resolve(self, table: str, column: str) -> ColumnRef | None:
        """Case-insensitive lookup of ``table.column``."""
        ti = self.table_index(table)
        if ti is None:
            return None
        ci = self.tables[ti].column_index(column)
        if ci is None:
            return None
        return ColumnRef(ti, ci)

    def column(self, ref: ColumnRef) -> ColumnMeta:
        return self.tables[ref.table_index].columns[ref.column_index]

    def without_metadata(self) -> DatabaseSchema:
        tables = tuple(
            replace(t, description=None, columns=tuple(c.without_metadata() for c in t.columns))
            for t in self.tables
        )
        return DatabaseSchema(self.db_id, tables)

    def has_column_metadata(self) -> bool:
        return any(
            c.description or c.value_description or c.data_format
            for t in self.tables
            for c in t.columns
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "db_id": self.db_id,
            "tables": [
                {
                    "name": t.name,
                    "description": t.description,
                    "columns": [
                        {
                            "name": c.name,
                            "data_type": c.data_type,
                            "description": c.description,
                            "value_description": c.value_description,
                            "data_format": c.data_format,
                        }
                        for c in t.columns
                    ],
                    "primary_key": list(t.primary_key),
                    "foreign_keys": [
                        [fk.column_index, fk.target.table_index, fk.target.column_index]
                        for fk in t.foreign_keys
                    ],
                }
                for t in self.tables
            ],
        }
        if self.metadata is not None:
            out["metadata"] = list(self.metadata.items)
        return out

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> DatabaseSchema:
        from dbroute.corpus import EvidenceSet

        tables = []
        for t in doc["tables"]:
            columns = tuple(
                ColumnMeta(
                    name=c["name"],
                    data_type=c.get("data_type", ""),
                    description=c.get("description"),
                    value_description=c.get("value_description"),
                    data_format=c.get("data_format"),
                )
                for c in t["columns"]
            )
            fks = tuple(ForeignKey(a, ColumnRef(b, c)) for a, b, c in t.get("foreign_keys", []))
            tables.append(
                TableMeta(
                    name=t["name"],
                    columns=columns,
                    primary_key=tuple(t.get("primary_key", [])),
                    foreign_keys=fks,
                    description=t.get("description"),
                )
            )
        metadata = doc.get("metadata")
        return cls(
            doc["db_id"],
            tuple(tables),
            EvidenceSet.from_iterable(metadata) if metadata is not None else None,
        )


# ---------------------------------------------------------------------------
# Spider-style catalog records


def load_catalog(doc: Mapping[str, Any]) -> DatabaseSchema:
    """Build a schema from one ``tables.json``-shaped record.

    Global column indices (which count the leading ``*`` pseudo-column) are
    converted to per-table ``(table, column)`` pairs.
    """
    try:
        db_id = doc["db_id"]
        table_names = list(doc.get("table_names_original") or doc["table_names"])
        column_names = list(doc.get("column_names_original") or doc["column_names"])
        column_types = list(doc["column_types"])
    except KeyError as exc:
        raise SchemaError(f"catalog record missing required field {exc.args[0]!r}") from None
    if len(column_types) != len(column_names):
        raise SchemaError(f"{db_id}: column_types and column_names lengths differ")

    per_table: list[list[ColumnMeta]] = [[] for _ in table_names]
    global_to_ref: dict[int, ColumnRef] = {}
    for gi, (entry, ctype) in enumerate(zip(column_names, column_types)):
        ti, name = entry
        if ti == -1:
            continue
        if not 0 <= ti < len(table_names):
            raise SchemaError(f"{db_id}: column {name!r} names table index {ti} out of range")
        global_to_ref[gi] = ColumnRef(ti, len(per_table[ti]))
        per_table[ti].append(ColumnMeta(name=name, data_type=str(ctype)))

    def ref(gi: Any) -> ColumnRef:
        if not isinstance(gi, int) or gi not in global_to_ref:
            raise SchemaError(
                f"{db_id}: column index {gi!r} out of range (0..{len(column_names) - 1}, excluding '*')"
            )
        return global_to_ref[gi]

    pks: list[list[int]] = [[] for _ in table_names]
    for entry in doc.get("primary_keys", []):
        # newer Spider releases nest composite keys as lists
        for gi in entry if isinstance(entry, list) else [entry]:
            r = ref(gi)
            pks[r.table_index].append(r.column_index)

    fks: list[list[ForeignKey]] = [[] for _ in table_names]
    for pair in doc.get("foreign_keys", []):
        if len(pair) != 2:
            raise SchemaError(f"{db_id}: malformed foreign key pair {pair!r}")
        src, dst = ref(pair[0]), ref(pair[1])
        fks[src.table_index].append(ForeignKey(src.column_index, dst))

    tables = tuple(
        TableMeta(
            name=name,
            columns=tuple(per_table[i]),
            primary_key=tuple(pks[i]),
            foreign_keys=tuple(fks[i]),
        )
        for i, name in enumerate(table_names)
    )
    return DatabaseSchema(db_id, tables)


def _read_csv_rows(path: Path) -> list[dict[str, str]]:
    # BIRD description files mix encodings
    for encoding in ("utf-8-sig", "latin-1"):
        try:
            with open(path, newline="", encoding=encoding) as fh:
                return list(csv.DictReader(fh))
        except UnicodeDecodeError:
            continue
    raise SchemaError(f"cannot decode {path}")


def _clean(value: str | None) -> str | None:
    if value is None:
        return None
    value = " ".join(value.split())
    return value or None


def apply_column_metadata(schema: DatabaseSchema, paths: Iterable[Path | str]) -> DatabaseSchema:
    """Attach per-column descriptions from BIRD-layout CSV files.

    A CSV either carries a ``table_name`` column, or is named after its table
    (``database_description/<table>.csv``).  Rows naming unknown tables or
    columns are logged and skipped.
    """
    updates: dict[tuple[int, int], dict[str, str | None]] = {}
    for path in paths:
        path = Path(path)
        for row in _read_csv_rows(path):
            row = {(k or "").strip().lower(): v for k, v in row.items()}
            table = row.get("table_name") or path.stem
            column = (row.get("original_column_name") or "").strip()
            ref = schema.resolve(table, column)
            if ref is None:
                log.warning("%s: no column %s.%s for metadata row", schema.db_id, table, column)
                continue
            updates[(ref.table_index, ref.column_index)] = {
                "description": _clean(row.get("column_description")),
                "data_format": _clean(row.get("data_format")),
                "value_description": _clean(row.get("value_description")),
            }
    tables = []
    for ti, table in enumerate(schema.tables):
        cols = tuple(
            replace(col, **updates[(ti, ci)]) if (ti, ci) in updates else col
            for ci, col in enumerate(table.columns)
        )
        tables.append(replace(table, columns=cols))
    return replace(schema, tables=tuple(tables))


# ---------------------------------------------------------------------------
# Schema documents


def quote_identifier(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def render_create_table(schema: DatabaseSchema, table: TableMeta) -> str:
    parts = []
    for col in table.columns:
        parts.append(f"{quote_identifier(col.name)} {col.data_type}".rstrip())
    if table.primary_key:
        cols = ", ".join(quote_identifier(table.columns[i].name) for i in table.primary_key)
        parts.append(f"PRIMARY KEY ({cols})")
    for fk in table.foreign_keys:
        target_table = schema.tables[fk.target.table_index]
        parts.append(
            "FOREIGN KEY ({}) REFERENCES {}({})".format(
                quote_identifier(table.columns[fk.column_index].name),
                quote_identifier(target_table.name),
                quote_identifier(target_table.columns[fk.target.column_index].name),
            )
        )
    return f"CREATE TABLE {quote_identifier(table.name)} ({', '.join(parts)});"


def _column_line(number: int, col: ColumnMeta) -> str:
    fields = [f"column_name: {col.name}"]
    if col.description:
        fields.append(f"Column description: {col.description}")
    if col.value_description:
        fields.append(f"Value description: {col.value_description}")
    if col.data_format:
        fields.append(f"Data format: {col.data_format}")
    return f"COLUMN {number} " + "; ".join(fields)


def serialize_schema_document(schema: DatabaseSchema, include_metadata: bool = True) -> str:
    """Render the schema as the text document used for embedding and prompting.

    Each table contributes a header, its ``CREATE TABLE`` statement and, when
    ``include_metadata`` is set, a description line plus one numbered line per
    column carrying its description and data format.
    """
    lines = [f"Database: {schema.db_id}"]
    for table in schema.tables:
        lines.append(f"Table: {table.name}")
        lines.append(render_create_table(schema, table))
        if include_metadata:
            lines.append(f"Table Description: {table.description or table.name}")
            for number, col in enumerate(table.columns, start=1):
                lines.append(_column_line(number, col))
    return "\n".join(lines) + "\n"


def serialize_compact(schema: DatabaseSchema) -> str:
    """One line per table: ``table(col, col, ...)``."""
    lines = [f"Database: {schema.db_id}"]
    for table in schema.tables:
        lines.append(f"{table.name}({', '.join(c.name for c in table.columns)})")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Join graphs


@dataclass(frozen=True)
class SchemaGraph:
    """Undirected join graph over table indices."""

    db_id: str
    adjacency: Mapping[int, frozenset[int]]
    edge_columns: Mapping[tuple[int, int], tuple[tuple[ColumnRef, ColumnRef], ...]] = field(
        default_factory=dict, compare=False
    )

    def __post_init__(self) -> None:
        adj = {int(i): frozenset(int(j) for j in nbrs) for i, nbrs in self.adjacency.items()}
        n = len(adj)
        if sorted(adj) != list(range(n)):
            raise SchemaError(f"{self.db_id}: adjacency keys must be 0..{n - 1}")
        for i, nbrs in adj.items():
            for j in nbrs:
                if j == i:
                    raise SchemaError(f"{self.db_id}: self-loop on table {i}")
                if not 0 <= j < n:
                    raise SchemaError(f"{self.db_id}: neighbour {j} of table {i} out of range")
                if i not in adj[j]:
                    raise SchemaError(f"{self.db_id}: adjacency not symmetric for edge {i}-{j}")
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_tables(self) -> int:
        return len(self.adjacency)

    @classmethod
    def from_edges(
        cls,
        db_id: str,
        n_tables: int,
        edges: Iterable[tuple[int, int]],
        edge_columns: Mapping[tuple[int, int], Sequence[tuple[ColumnRef, ColumnRef]]] | None = None,
    ) -> SchemaGraph:
        """Symmetric closure of ``edges``; self-loops are dropped."""
        adj: dict[int, set[int]] = {i: set() for i in range(n_tables)}
        for a, b in edges:
            if not (0 <= a < n_tables and 0 <= b < n_tables):
                raise SchemaError(f"{db_id}: edge {a}-{b} out of range for {n_tables} tables")
            if a == b:
                continue
            adj[a].add(b)
            adj[b].add(a)
        cols = {k: tuple(v) for k, v in (edge_columns or {}).items()}
        return cls(db_id, {i: frozenset(s) for i, s in adj.items()}, cols)

    def edges(self) -> list[tuple[int, int]]:
        return sorted((i, j) for i, nbrs in self.adjacency.items() for j in nbrs if i < j)

    def to_dict(self) -> dict[str, Any]:
        return {str(i): sorted(self.adjacency[i]) for i in range(self.n_tables)}


def build_join_graph_from_keys(schema: DatabaseSchema, name_heuristic: bool = False) -> SchemaGraph:
    """Join graph with one edge per declared foreign key.

    With ``name_heuristic``, tables sharing an identically named column that
    is a primary key in at least one of the two are also joined.
    """
    edge_cols: dict[tuple[int, int], list[tuple[ColumnRef, ColumnRef]]] = {}

    def add(a: ColumnRef, b: ColumnRef) -> None:
        if a.table_index == b.table_index:
            return
        if a.table_index > b.table_index:
            a, b = b, a
        pairs = edge_cols.setdefault((a.table_index, b.table_index), [])
        if (a, b) not in pairs:
            pairs.append((a, b))

    for ti, table in enumerate(schema.tables):
        for fk in table.foreign_keys:
            add(ColumnRef(ti, fk.column_index), fk.target)

    if name_heuristic:
        for i, ta in enumerate(schema.tables):
            for j in range(i + 1, len(schema.tables)):
                tb = schema.tables[j]
                for ca_idx, col in enumerate(ta.columns):
                    cb_idx = tb.column_index(col.name)
                    if cb_idx is None:
                        continue
                    if ca_idx in ta.primary_key or cb_idx in tb.primary_key:
                        add(ColumnRef(i, ca_idx), ColumnRef(j, cb_idx))

    return SchemaGraph.from_edges(schema.db_id, len(schema.tables), edge_cols.keys(), edge_cols)


def is_connected_subset(
    graph: SchemaGraph, tables: Iterable[int], allow_steiner_tables: bool = False
) -> bool:
    """Whether ``tables`` are mutually reachable in the join graph.

    By default only edges between members count (induced subgraph).  With
    ``allow_steiner_tables`` paths may pass through other tables.
    """
    members = set(tables)
    for t in members:
        if not 0 <= t < graph.n_tables:
            raise IndexError(f"table index {t} out of range for {graph.n_tables} tables")
    if len(members) <= 1:
        return True
    start = next(iter(members))
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        for nbr in graph.adjacency[node]:
            if nbr in seen or (not allow_steiner_tables and nbr not in members):
                continue
            seen.add(nbr)
            queue.append(nbr)
    return members <= seen


def connected_components(graph: SchemaGraph) -> list[frozenset[int]]:
    comps: list[frozenset[int]] = []
    seen: set[int] = set()
    for start in range(graph.n_tables):
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nbr in graph.adjacency[node]:
                if nbr not in comp:
                    comp.add(nbr)
                    queue.append(nbr)
        seen |= comp
        comps.append(frozenset(comp))
    return comps


def load_catalog_file(path: Path | str) -> list[DatabaseSchema]:
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    return [load_catalog(r) for r in records]

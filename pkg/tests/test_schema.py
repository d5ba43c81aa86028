import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbroute.corpus import EvidenceSet
from dbroute.schema import (
    ColumnMeta,
    ColumnRef,
    DatabaseSchema,
    ForeignKey,
    SchemaError,
    SchemaGraph,
    TableMeta,
    apply_column_metadata,
    build_join_graph_from_keys,
    connected_components,
    is_connected_subset,
    load_catalog,
    render_create_table,
    serialize_compact,
    serialize_schema_document,
)


def test_catalog_skips_star_and_maps_keys(spider_record):
    s = load_catalog(spider_record)
    assert [t.name for t in s.tables] == ["stadium", "singer", "concert", "singer_in_concert"]
    assert [c.name for c in s.tables[0].columns] == ["Stadium_ID", "Location", "Capacity"]
    assert s.tables[3].primary_key == (0, 1)
    fk = s.tables[2].foreign_keys[0]
    assert fk.column_index == 2 and fk.target == ColumnRef(0, 0)


def test_catalog_rejects_out_of_range_fk(spider_record):
    spider_record["foreign_keys"].append([11, len(spider_record["column_names"])])
    with pytest.raises(SchemaError):
        load_catalog(spider_record)


def test_catalog_missing_field():
    with pytest.raises(SchemaError, match="db_id"):
        load_catalog({"table_names": []})


def test_table_validation():
    with pytest.raises(SchemaError):
        TableMeta("t", (ColumnMeta("a"), ColumnMeta("A")))
    with pytest.raises(SchemaError):
        TableMeta("t", (ColumnMeta("a"),), primary_key=(3,))
    with pytest.raises(SchemaError):
        DatabaseSchema("d", (TableMeta("t", (ColumnMeta("a"),), foreign_keys=(ForeignKey(0, ColumnRef(5, 0)),)),))


def test_resolve_is_case_insensitive(school):
    assert school.resolve("STUDENT", "Student_Name") == ColumnRef(0, 1)
    assert school.resolve("student", "nope") is None


def test_dict_round_trip(school):
    s = DatabaseSchema(school.db_id, school.tables, EvidenceSet.from_iterable(["age is in years"]))
    again = DatabaseSchema.from_dict(json.loads(json.dumps(s.to_dict())))
    assert again == s


def test_create_table_rendering(school):
    text = render_create_table(school, school.tables[2])
    assert text.startswith('CREATE TABLE "member_of"')
    assert 'FOREIGN KEY ("student_id") REFERENCES "student"("student_id")' in text
    assert text.endswith(";")


def test_document_with_and_without_metadata(tmp_path, school):
    csv_path = tmp_path / "student.csv"
    csv_path.write_text(
        "original_column_name,column_name,column_description,data_format,value_description\n"
        "age,age,age of the student in years,integer,\n"
        "ghost,ghost,missing column,,\n",
        encoding="utf-8",
    )
    enriched = apply_column_metadata(school, [csv_path])
    assert enriched.tables[0].columns[2].description == "age of the student in years"
    with_meta = serialize_schema_document(enriched, include_metadata=True)
    without = serialize_schema_document(enriched, include_metadata=False)
    assert "age of the student in years" in with_meta
    assert "age of the student in years" not in without
    assert "student(student_id, student_name, age)" in serialize_compact(school).splitlines()


def test_fk_graph(school):
    g = build_join_graph_from_keys(school)
    assert g.adjacency == {0: {2}, 1: {2}, 2: {0, 1}, 3: set()}
    assert g.edge_columns[(0, 2)] == ((ColumnRef(0, 0), ColumnRef(2, 0)),)


def test_name_heuristic_joins_shared_key_names():
    s = DatabaseSchema("d", (
        TableMeta("a", (ColumnMeta("x_id"), ColumnMeta("v")), primary_key=(0,)),
        TableMeta("b", (ColumnMeta("x_id"), ColumnMeta("w"))),
        TableMeta("c", (ColumnMeta("v"),)),
    ))
    assert build_join_graph_from_keys(s).edges() == []
    # 'v' is not a key anywhere, so only a-b is joined
    assert build_join_graph_from_keys(s, name_heuristic=True).edges() == [(0, 1)]


def test_graph_validation():
    with pytest.raises(SchemaError):
        SchemaGraph("d", {0: frozenset({1}), 1: frozenset()})
    with pytest.raises(SchemaError):
        SchemaGraph("d", {0: frozenset({0})})
    g = SchemaGraph.from_edges("d", 3, [(0, 1), (1, 1)])
    assert g.adjacency[1] == {0}


def test_induced_vs_junction_connectivity(activity):
    g = SchemaGraph.from_edges(activity.db_id, 5, [(0, 1), (0, 2), (1, 3), (2, 4)])
    assert is_connected_subset(g, set())
    assert is_connected_subset(g, {4})
    assert is_connected_subset(g, {0, 1, 3})
    assert not is_connected_subset(g, {0, 3})
    assert is_connected_subset(g, {0, 3}, allow_steiner_tables=True)
    with pytest.raises(IndexError):
        is_connected_subset(g, {7})


def test_components():
    g = SchemaGraph.from_edges("d", 5, [(0, 1), (3, 4)])
    assert sorted(sorted(c) for c in connected_components(g)) == [[0, 1], [2], [3, 4]]


@st.composite
def edge_lists(draw):
    n = draw(st.integers(1, 8))
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
    return n, draw(st.lists(pairs, max_size=20))


@settings(max_examples=200, deadline=None)
@given(edge_lists())
def test_graph_from_edges_is_symmetric(data):
    n, edges = data
    g = SchemaGraph.from_edges("d", n, edges)
    for i, nbrs in g.adjacency.items():
        assert i not in nbrs
        for j in nbrs:
            assert i in g.adjacency[j]


@settings(max_examples=200, deadline=None)
@given(edge_lists(), st.data())
def test_adding_edges_never_disconnects(data, draw):
    n, edges = data
    subset = draw.draw(st.sets(st.integers(0, n - 1)))
    extra = draw.draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=5))
    before = SchemaGraph.from_edges("d", n, edges)
    after = SchemaGraph.from_edges("d", n, list(edges) + extra)
    for steiner in (False, True):
        if is_connected_subset(before, subset, steiner):
            assert is_connected_subset(after, subset, steiner)


def test_activity_student_and_faculty_not_induced_connected(activity):
    g = SchemaGraph.from_edges(activity.db_id, 5, [(0, 1), (0, 2), (1, 3), (2, 4)])
    assert not is_connected_subset(g, {3, 4})


def test_heuristic_adds_shared_primary_key_name_edge():
    s = DatabaseSchema("d", (
        TableMeta("a", (ColumnMeta("a_id"), ColumnMeta("b_ref")), primary_key=(0,),
                  foreign_keys=(ForeignKey(1, ColumnRef(1, 0)),)),
        TableMeta("b", (ColumnMeta("b_id"), ColumnMeta("c_id")), primary_key=(0,)),
        TableMeta("c", (ColumnMeta("c_id"), ColumnMeta("label")), primary_key=(0,)),
    ))
    assert build_join_graph_from_keys(s).edges() == [(0, 1)]
    assert build_join_graph_from_keys(s, name_heuristic=True).edges() == [(0, 1), (1, 2)]

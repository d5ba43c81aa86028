from __future__ import annotations

from pathlib import Path

import pytest

from dbroute.ddl import parse_ddl
from dbroute.schema import DatabaseSchema

ROOT = Path(__file__).resolve().parent.parent
TOY = ROOT / "data" / "toy_corpus"

ACTIVITY_DDL = """
CREATE TABLE Activity (activity_id INTEGER PRIMARY KEY, activity_name TEXT);
CREATE TABLE Participates_in (student_id INTEGER, activity_id INTEGER);
CREATE TABLE Faculty_Participates_in (faculty_id INTEGER, activity_id INTEGER);
CREATE TABLE Student (student_name TEXT, student_id INTEGER PRIMARY KEY);
CREATE TABLE Faculty (faculty_name TEXT, faculty_id INTEGER PRIMARY KEY);
"""

SCHOOL_DDL = """
CREATE TABLE student (student_id INTEGER PRIMARY KEY, student_name TEXT, age INTEGER);
CREATE TABLE club (club_id INTEGER PRIMARY KEY, club_name TEXT);
CREATE TABLE member_of (student_id INTEGER REFERENCES student, club_id INTEGER REFERENCES club);
CREATE TABLE trophy (trophy_id INTEGER PRIMARY KEY, trophy_name TEXT);
"""


@pytest.fixture
def activity() -> DatabaseSchema:
    return parse_ddl(ACTIVITY_DDL, "activity_1")


@pytest.fixture
def school() -> DatabaseSchema:
    return parse_ddl(SCHOOL_DDL, "school")


@pytest.fixture
def spider_record() -> dict:
    return {
        "db_id": "concert_singer",
        "table_names_original": ["stadium", "singer", "concert", "singer_in_concert"],
        "table_names": ["stadium", "singer", "concert", "singer in concert"],
        "column_names_original": [
            [-1, "*"],
            [0, "Stadium_ID"], [0, "Location"], [0, "Capacity"],
            [1, "Singer_ID"], [1, "Name"], [1, "Country"],
            [2, "concert_ID"], [2, "concert_Name"], [2, "Stadium_ID"],
            [3, "concert_ID"], [3, "Singer_ID"],
        ],
        "column_names": [
            [-1, "*"],
            [0, "stadium id"], [0, "location"], [0, "capacity"],
            [1, "singer id"], [1, "name"], [1, "country"],
            [2, "concert id"], [2, "concert name"], [2, "stadium id"],
            [3, "concert id"], [3, "singer id"],
        ],
        "column_types": ["text", "number", "text", "number", "number", "text", "text",
                         "number", "text", "text", "number", "number"],
        "primary_keys": [1, 4, 7, [10, 11]],
        "foreign_keys": [[9, 1], [10, 7], [11, 4]],
    }


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and report.when == "call":
        report.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for report in terminalreporter.stats.get(key, []):
            props = dict(getattr(report, "user_properties", ()))
            if "criterion" in props and report.when == "call":
                lines.append((report.nodeid, f"{'PASS' if report.passed else 'FAIL'}  {props['criterion']}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

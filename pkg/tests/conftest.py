from __future__ import annotations

import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def case1_text() -> str:
    return (FIXTURES / "case1_cot.txt").read_text(encoding="utf-8")


@pytest.fixture
def case2_text() -> str:
    return (FIXTURES / "case2_cot.txt").read_text(encoding="utf-8")


@pytest.fixture
def qa_example() -> dict:
    return json.loads((FIXTURES / "qa_example.json").read_text(encoding="utf-8"))


# ------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        prev = _CRITERIA.get(n, ("PASS", title))[0]
        _CRITERIA[n] = ("FAIL" if failed or prev == "FAIL" else "PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {title}")

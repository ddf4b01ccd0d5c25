import json
from pathlib import Path

import pytest

from dxrag.corpus import ingest_cases, load_store_dir
from dxrag.retrieval.env import DiagnosticEnvironment

FIXTURES = Path(__file__).parent / "fixtures"
AML = "Acute myeloid leukemia"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def corpora():
    return load_store_dir(FIXTURES / "store")


@pytest.fixture(scope="session")
def env(corpora):
    return DiagnosticEnvironment(corpora)


@pytest.fixture(scope="session")
def case():
    return ingest_cases(FIXTURES / "cases.jsonl", strict=True).items[0]


@pytest.fixture(scope="session")
def case_study_text():
    return (FIXTURES / "case_study.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def replay_deltas():
    return json.loads((FIXTURES / "case_study_replay.json").read_text(encoding="utf-8"))


# -- acceptance reporting --------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, name = marker.args
    entry = _CRITERIA.setdefault(number, {"name": name, "ok": True, "seconds": 0.0})
    if report.when == "call":
        entry["seconds"] += report.duration
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {e['name']} ({e['seconds']:.2f}s)")

"""Per-criterion PASS/FAIL summary for the acceptance tests."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_results: dict[int, list[bool]] = {}
_labels: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, label): acceptance criterion number and label")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n = m.args[0]
    _labels[n] = m.args[1] if len(m.args) > 1 else ""
    if rep.when == "call" or rep.failed:
        _results.setdefault(n, []).append(rep.passed and not rep.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok = all(_results[n])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {_labels[n]}")

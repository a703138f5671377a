"""Print one PASS/FAIL line per numbered acceptance criterion at the end of
the run, so the acceptance verdicts are visible without scrolling the
per-test output."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_results: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = _CRITERION.search(report.nodeid)
    if m:
        _results[int(m.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        verdict = "PASS" if _results[n] == "passed" else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE C{n}: {verdict}")

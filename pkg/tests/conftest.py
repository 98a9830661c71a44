"""Collects acceptance-criterion outcomes and prints one line per criterion at the end."""

import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def verdict(request):
    """Dict the test can fill with a short ``detail`` string shown next to its pass/fail line."""
    store = {}
    request.node._verdict = store
    return store


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed or report.skipped:
        detail = getattr(item, "_verdict", {}).get("detail", "")
        if report.skipped:
            status = "SKIP"
        else:
            status = "FAIL" if failed else "PASS"
        prev = _results.get(number)
        if prev is None or prev[1] != "FAIL":
            _results[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, detail = _results[number]
        line = f"criterion {number} [PRIMARY] {title}: {status}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)

"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.failed or report.when == "call":
        prev = _RESULTS.get(number)
        ok = report.passed and (prev is None or prev[1])
        _RESULTS[number] = (title, ok, detail or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        line = f"criterion {number:>2} {title}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))

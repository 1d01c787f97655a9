"""Collects ``@pytest.mark.criterion(n, title)`` outcomes and prints one line per acceptance criterion."""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= report.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "measured" and report.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(entry["details"]))
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}: {entry['title']}{suffix}")

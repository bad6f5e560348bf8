"""Collects one verdict line per acceptance criterion and prints them at the end."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record ``(number, status, detail)``; status is PASS, FAIL or RED."""
    def record(number: int, status: str, detail: str = ""):
        VERDICTS[number] = (status, detail)
        print(f"CRITERION {number:2d}: {status} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        status, detail = VERDICTS[k]
        terminalreporter.write_line(f"CRITERION {k:2d}: {status} {detail}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" or not rep.failed:
        return
    number = marker.args[0]
    status, _ = VERDICTS.get(number, ("", ""))
    if status != "FAIL":
        VERDICTS[number] = ("FAIL", f"({call.excinfo.typename}: {str(call.excinfo.value)[:120]})")

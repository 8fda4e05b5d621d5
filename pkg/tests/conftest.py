import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.when == "setup" and report.skipped:
        _CRITERIA[number] = (title, "SKIP", str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "")
    elif report.when == "call":
        status = "SKIP" if report.skipped else "PASS" if report.passed else "FAIL"
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[-1]
        _CRITERIA[number] = (title, status, detail)
    elif report.failed:
        _CRITERIA[number] = (title, "FAIL", f"error during {report.when}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"{status} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))

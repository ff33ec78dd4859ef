import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or rep.failed:
        prev = _criteria.get(number, (title, True, 0.0))
        _criteria[number] = (title, prev[1] and rep.passed, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, secs = _criteria[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}  ({secs:.1f}s)")

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(label, passed, detail)``."""
    def _record(label, passed, detail=""):
        _ACCEPTANCE.append((label, bool(passed), detail))
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")

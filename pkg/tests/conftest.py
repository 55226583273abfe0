"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    def record(label, passed, detail, gating=True):
        status = "PASS" if passed else ("FAIL" if gating else "FAIL (non-gating)")
        _VERDICTS.append(f"[{status}] {label}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(_VERDICTS, key=lambda s: int(s.split("] C", 1)[1].split(" ", 1)[0])):
        terminalreporter.write_line(line)

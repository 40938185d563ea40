"""Shared test plumbing: the acceptance suite records one line per
criterion and the lines are echoed after the run, pass or fail."""

import pytest

_CRITERION_LINES = {}


@pytest.fixture
def criterion():
    """Recorder handle; tests call criterion(n, desc, ok, detail)."""
    return record_criterion


def record_criterion(number, description, passed, detail=""):
    tag = "PASS" if passed else "FAIL"
    line = f"[{tag}] criterion {number:2d}: {description}"
    if detail:
        line += f" -- {detail}"
    _CRITERION_LINES[number] = line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERION_LINES):
            terminalreporter.write_line(_CRITERION_LINES[number])

"""Shared fixtures, including the acceptance summary printed after a run."""

import pytest


class AcceptanceLog:
    """Collects one pass/fail line per acceptance criterion.

    Tests in test_acceptance.py record their verdict here before asserting,
    so the terminal summary shows every criterion's outcome even when one of
    them fails the assertion that follows.
    """

    def __init__(self):
        self.entries = {}

    def record(self, criterion: int, label: str, passed: bool, detail: str = ""):
        self.entries[criterion] = (label, bool(passed), detail)


_LOG = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance_log():
    return _LOG


def pytest_terminal_summary(terminalreporter):
    if not _LOG.entries:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_LOG.entries):
        label, passed, detail = _LOG.entries[criterion]
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {criterion} [{verdict}] {label}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)

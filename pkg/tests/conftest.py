"""Collects the acceptance verdicts and prints them as one block at the end of the run."""

import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(number, name, ok, detail):
        VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  criterion {number} ({name}): {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

"""Collects the one-line acceptance verdicts and prints them after the run.

Output capture would otherwise swallow them for passing tests.
"""
import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

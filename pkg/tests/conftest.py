"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""

import pytest

RESULTS: list[str] = []


@pytest.fixture
def record():
    def add(number: int, ok: bool, detail: str) -> bool:
        RESULTS.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

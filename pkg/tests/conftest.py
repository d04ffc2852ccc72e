from __future__ import annotations

import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed again in the terminal summary."""

    def record(name: str, passed: bool | None, detail: str = "") -> bool:
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"{status}  {name}" + (f"  ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

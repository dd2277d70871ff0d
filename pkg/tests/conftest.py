import pytest

_LINES = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""
    def record(number: int, passed: bool, detail: str):
        _LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])

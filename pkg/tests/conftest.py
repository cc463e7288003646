import pytest

_LINES = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and fail on FAIL."""

    def report(k: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {k:>2}: {detail}"
        _LINES[k] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])

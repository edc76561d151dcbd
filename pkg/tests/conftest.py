import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    def record(number: int, ok: bool, detail: str):
        _LINES.append((number, f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"))
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)

import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then fail the test if the check did not hold."""
    def record(number, ok, detail):
        _LINES.append((number, ok, detail))
        assert ok, f"criterion {number} not met: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

import pytest

_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; lines are printed in the terminal summary."""

    def add(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append((number, line))
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)

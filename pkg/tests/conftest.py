import pytest

_LINES = []


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line and records it."""

    def report(n, ok, detail):
        line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

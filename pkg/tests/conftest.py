import pytest

_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance verdict; the lines are printed after the run."""
    def record(number, title: str, passed: bool, detail: str) -> bool:
        _LINES.append(f"{'PASS' if passed else 'FAIL'}  criterion {number} ({title}): {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_LINES, key=lambda s: s.split("criterion ", 1)[1]):
            terminalreporter.write_line(line)

import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the collected lines print in the terminal summary."""
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])

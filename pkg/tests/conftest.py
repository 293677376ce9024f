import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record an acceptance outcome: ``criterion(n, passed, detail)``."""

    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

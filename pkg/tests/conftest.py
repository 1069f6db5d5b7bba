import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record a named acceptance verdict; the summary prints one line per criterion."""

    def record(number, title, passed, detail):
        _CRITERIA[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
        assert passed, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")

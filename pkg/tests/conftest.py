import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record a criterion outcome; the summary prints one line per criterion."""

    def report(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] #{number} {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])

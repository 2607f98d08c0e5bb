import pytest

_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _VERDICTS.append(line)
        print(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)

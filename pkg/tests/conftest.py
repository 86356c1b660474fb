import pytest


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``record(n, ok, detail)``."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        request.config._criteria.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for line in config._criteria:
            terminalreporter.write_line(line)

import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture(scope="session")
def verdicts(request):
    """Append ``(criterion, passed, detail)``; printed in the terminal summary."""
    return request.config.stash[VERDICTS]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(lines, key=lambda v: v[0]):
        terminalreporter.write_line(f"{name}: {passed} | {detail}")

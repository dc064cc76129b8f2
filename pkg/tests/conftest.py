import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def report(label, passed, detail, info=()):
        lines = [f"{label:<4} {'PASS' if passed else 'FAIL'}  {detail}"]
        lines += [f"     info  {extra}" for extra in info]
        request.config.stash[_LINES].extend(lines)
        print("\n".join(lines))
        assert passed, detail

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

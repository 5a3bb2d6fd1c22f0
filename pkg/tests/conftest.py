import pytest

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``report(n, title, passed, detail)`` records one acceptance line and returns ``passed``."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def report(n, title, passed, detail=""):
        line = f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        store[n] = line
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.line(store[n])

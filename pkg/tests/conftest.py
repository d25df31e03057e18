import pytest

_verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_verdicts] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(number, title, ok, detail)``."""
    store = request.config.stash[_verdicts]

    def record(number, title, ok, detail=""):
        store.append((number, title, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = sorted(config.stash.get(_verdicts, []), key=lambda r: r[0])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in rows:
        mark = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{mark}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))

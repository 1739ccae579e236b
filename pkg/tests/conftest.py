import pytest

_KEY = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Return a recorder that logs one PASS/FAIL line per acceptance criterion."""
    log = request.config.stash.setdefault(_KEY, [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        log.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_KEY, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(log):
        terminalreporter.write_line(line)

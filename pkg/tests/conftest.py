import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion.

    Call as ``verdict(number, title, passed, detail)``; a test that errors out
    before calling it is recorded as a failure.
    """
    lines = request.config.stash[_LINES]
    seen = []

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        lines.append((number, line))
        seen.append(number)
        print(line)
        return passed

    yield record
    if not seen:
        num = getattr(request.node.function, "criterion", 0)
        lines.append((num, f"[FAIL] criterion {num:>2}: {request.node.name} raised before reaching a verdict"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

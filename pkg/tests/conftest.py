import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance_log(request):
    """Record one verdict line per criterion; all lines are repeated in the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(name: str, passed: bool | None, detail: str) -> None:
        verdict = {True: "PASS", False: "FAIL", None: "INFO"}[passed]
        line = f"{name} {verdict}: {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

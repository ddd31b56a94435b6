import pytest
from hypothesis import settings

# derandomized so repeated runs exercise the same examples
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def check(criterion: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)

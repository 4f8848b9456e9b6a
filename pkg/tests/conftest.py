import pytest

RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on its own."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        RESULTS[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

import pytest

from rapidex.mission import MissionConfig, run_mission

CRITERIA: dict = {}


class Criteria:
    """Collects one verdict line per acceptance criterion."""

    def report(self, n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[n] = line
        print(line)
        return ok


@pytest.fixture(scope="session")
def criteria() -> Criteria:
    return Criteria()


@pytest.fixture(scope="session")
def missions():
    """Memoized run_mission: identical configs are flown once per session."""
    cache: dict = {}

    def fly(**kw):
        key = tuple(sorted((k, repr(v)) for k, v in kw.items()))
        if key not in cache:
            cache[key] = run_mission(MissionConfig(**kw))
        return cache[key]

    fly.cache = cache
    return fly


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])

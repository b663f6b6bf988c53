import asyncio
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion and assert it."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS].append((n, line))
        print(line)
        assert ok, line

    return record


def run_async(coro, timeout: float = 60.0):
    return asyncio.run(asyncio.wait_for(coro, timeout))

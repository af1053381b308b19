from pathlib import Path

import pytest

from domino.model import load_portfolio

FIXTURES = Path(__file__).parent / "fixtures"

# acceptance lines collected by test_acceptance, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def fixture_path():
    return lambda name: str(FIXTURES / f"{name}.json")


@pytest.fixture
def portfolio():
    return lambda name: load_portfolio(FIXTURES / f"{name}.json")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

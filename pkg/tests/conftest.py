from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
W3C_FIXTURES = sorted(FIXTURES.glob("w3c_*.json"))
SPADE_FIXTURES = sorted(FIXTURES.glob("spade_*.json"))
ALL_FIXTURES = W3C_FIXTURES + SPADE_FIXTURES


@pytest.fixture
def fixture_bytes():
    def read(name: str) -> bytes:
        return (FIXTURES / name).read_bytes()
    return read


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import pytest

from fedharden.data import load_digits_upscaled
from fedharden.numerics import SeededRng

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def digits_bundle():
    return load_digits_upscaled(test_fraction=0.2, seed=0)


@pytest.fixture
def rng():
    return SeededRng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

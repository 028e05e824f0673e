import pytest

from servogate.predictors import fit_ensemble
from servogate.sim import generate_dataset


@pytest.fixture(scope="session")
def training_data():
    return generate_dataset(1000, 0)


@pytest.fixture(scope="session")
def ensemble(training_data):
    return fit_ensemble(training_data, n_members=5, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

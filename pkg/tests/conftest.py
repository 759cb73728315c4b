import numpy as np
import pytest

from declipper.harness.synth import synthetic_utterance


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def speech():
    return synthetic_utterance(7, duration=1.5)


@pytest.fixture(scope="session")
def corpus():
    return [synthetic_utterance(100 + i, duration=1.5) for i in range(6)]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

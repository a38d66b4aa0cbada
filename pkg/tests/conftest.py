import numpy as np
import pytest

from semmatch.pipeline import TrainConfig, synthetic_training_set, train

import acceptance_report


@pytest.fixture(scope="session")
def translation_model():
    """Regressor trained on 200 synthetic translation pairs, plus a held-out set."""
    ds, _ = synthetic_training_set(200, "translation", 0.3, seed=5)
    test, test_raw = synthetic_training_set(20, "translation", 0.3, seed=99)
    w, log = train(ds, TrainConfig(epochs=0, warm_up_steps=1000, seed=0))
    return {"weights": w, "log": log, "test": test, "test_raw": test_raw}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_report.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

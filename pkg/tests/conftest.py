import numpy as np
import pytest

from betsearch.dataset import InteractionDataset, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(60, 80, 900, 1.0, seed=3)


@pytest.fixture
def toy_ds():
    # 3 users, 4 items, hand-placed splits
    train = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)]
    val = [(0, 2), (1, 3), (2, 1)]
    test = [(0, 3), (1, 0), (2, 2)]
    return InteractionDataset(3, 4, np.array(train), np.array(val), np.array(test))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)

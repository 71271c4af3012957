import numpy as np
import pytest

from proto_ood.datasets import SyntheticConfig, generate_synthetic
from proto_ood.trainer import TrainConfig, train

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_splits():
    return generate_synthetic(SyntheticConfig())


@pytest.fixture(scope="session")
def trained_default(default_splits):
    train_split, _, _ = default_splits
    return train(train_split, TrainConfig())


@pytest.fixture(scope="session")
def small_splits():
    return generate_synthetic(SyntheticConfig(t=3, h=12, per_class=24, ood_clusters=2, ood_per_cluster=12, seed=7))


@pytest.fixture(scope="session")
def trained_small(small_splits):
    cfg = TrainConfig(epochs=8, lambda_start=3, omega_gap=2, batch_size=16, d=4, proj_hidden=8, sim_hidden=8, seed=3)
    return train(small_splits[0], cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

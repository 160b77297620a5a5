import sys

import numpy as np
import pytest

from titan.dataset import gen_synthetic
from titan.prior import build_prior
from titan.trainer import TrainConfig, prepare_data


def tiny_config(**kw) -> TrainConfig:
    base = dict(hidden_size=8, memory_size=8, heads=2, rank=2, t_in=4, t_out=4, batch_size=32, epochs=2, patience=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_series():
    return gen_synthetic(4, 2, interval_min=15, seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_series):
    return prepare_data(tiny_series, tiny_config())


@pytest.fixture(scope="session")
def tiny_prior(tiny_data):
    return build_prior(tiny_data.normalized, 0.7, tiny_data.train_range)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "_lines", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

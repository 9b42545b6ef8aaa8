from __future__ import annotations

import numpy as np
import pytest

from taltransfer.data import Dataset, compute_feature_stats, prepare
from taltransfer.generator import WeatherParams, default_task_params, generate_synthetic
from taltransfer.training import TrainConfig, train

# lines collected by test_acceptance, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_raw() -> Dataset:
    return generate_synthetic(default_task_params(4, seed=1), 4, WeatherParams(seed=3))


@pytest.fixture(scope="session")
def small_prepared(small_raw) -> Dataset:
    return prepare(small_raw, compute_feature_stats(small_raw.seasons()))


@pytest.fixture(scope="session")
def emb_model(small_prepared):
    cfg = TrainConfig(variant="embedding", epochs=8, hidden1=12, hidden2=16, rng_seed=5)
    return train(small_prepared, small_prepared.task_ids, cfg)


@pytest.fixture(scope="session")
def mh_model(small_prepared):
    cfg = TrainConfig(variant="multihead", epochs=8, hidden1=12, hidden2=16, rng_seed=5)
    return train(small_prepared, small_prepared.task_ids, cfg)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

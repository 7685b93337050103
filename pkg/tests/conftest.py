import numpy as np
import pytest

from stosa.data import build_sequences, k_core_filter
from stosa.model import ModelConfig, init_params
from stosa.synthetic import cyclic_interactions


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cyclic_dataset():
    return build_sequences(k_core_filter(cyclic_interactions(), 5))


def tiny_params(variant="stosa", d=8, n=5, n_layers=2, n_heads=1, n_items=12, seed=0,
                dtype=np.float64, **kw):
    cfg = ModelConfig(variant=variant, d=d, n=n, n_layers=n_layers, n_heads=n_heads,
                      dropout=kw.pop("dropout", 0.0), **kw)
    return init_params(cfg, n_items, np.random.default_rng(seed), dtype)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

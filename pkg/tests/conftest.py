import numpy as np
import pytest

import loftlab
from loftlab.convstack import ConvStackSpec
from loftlab.harness.config import DatasetSpec
from loftlab.harness.datasets import synthetic_theory

loftlab.Logger.setLevel("WARNING")


@pytest.fixture(autouse=True)
def no_saving(monkeypatch):
    monkeypatch.setattr(loftlab.FileManager, "saving_enabled", False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_spec():
    return ConvStackSpec.from_channels(1, 8, 8, [8, 16, 16, 32], 4)


@pytest.fixture
def tiny_spec():
    return ConvStackSpec.from_channels(1, 4, 4, [2, 4, 4, 2], 3)


def theory_data(n, seed, p=16, d_hat=1, q=9, label_bound=1.0):
    side = int(np.sqrt(p))
    spec = DatasetSpec(source="synthetic_theory", n=n, d_hat=d_hat, h=side, w=side, label_bound=label_bound)
    return synthetic_theory(spec, q, np.random.default_rng(seed))


@pytest.fixture
def make_theory_data():
    return theory_data

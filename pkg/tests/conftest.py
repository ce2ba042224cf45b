import numpy as np
import pytest

from xcpipe import synth_dataset


@pytest.fixture(scope="session")
def planted_small():
    """8 clusters x 50 docs, 4 labels and 16 tokens per cluster."""
    return synth_dataset(8, 50, 4, 16, 0.05, seed=11)


@pytest.fixture(scope="session")
def planted_16():
    """The benchmark corpus: 16 clusters x 200 docs."""
    return synth_dataset(16, 200, 8, 32, 0.05, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)

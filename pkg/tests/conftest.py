import numpy as np
import pytest

from msgr.synth import generate_set, make_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Eight procedural registered pairs at 96 px."""
    d = tmp_path_factory.mktemp("corpus")
    make_corpus(d, 8, 96, seed=0)
    return d


@pytest.fixture(scope="session")
def small_set(tmp_path_factory, corpus_dir):
    """Six 32x32 samples with rho = 4."""
    d = tmp_path_factory.mktemp("small_set")
    generate_set(corpus_dir, d, 6, size=32, rho=4, seed=3)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

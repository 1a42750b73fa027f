import numpy as np
import pytest
import torch

from mrjigsaw.data import SyntheticSpec, generate_synthetic
from mrjigsaw.permset import cached_pool, sample_class_set

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def pool9():
    return cached_pool(9, 4)


@pytest.fixture(scope="session")
def pset10(pool9):
    return sample_class_set(pool9, 10, seed=1)


@pytest.fixture
def frame256():
    rng = np.random.default_rng(0)
    return rng.random((256, 256)).astype(np.float32)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(n_per_class=6, frame_size=128, frames_min=4, frames_max=12, seed=3)


@pytest.fixture(scope="session")
def small_records(small_spec):
    _, records = generate_synthetic(small_spec)
    return records

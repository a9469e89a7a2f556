import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand_scores(rng, shape):
    return torch.tensor(rng.uniform(0.02, 0.98, size=shape), dtype=torch.float64)


def rand_logits(rng, shape, scale=3.0):
    return torch.tensor(rng.normal(0.0, scale, size=shape), dtype=torch.float64)

import numpy as np
import pytest

from conv4rec.dataset import ObservedDataset, RatingScale
from conv4rec.model import DecoderSpec, EncoderSpec, init_params


def make_dataset(m, n, N, k=5, seed=0):
    rng = np.random.default_rng(seed)
    cells = rng.choice(m * n, size=N, replace=False)
    return ObservedDataset(m, n, cells // n, cells % n, rng.integers(1, k + 1, N),
                           RatingScale.integer(1, k))


def make_params(n=12, k=5, r=4, L=3, K=6, enc_K=6, seed=0, biases=False, L0=1):
    enc = EncoderSpec(n, k, (enc_K,), (r,), biases)
    dec = DecoderSpec.uniform(n, k, r, L, K, L0, biases)
    return init_params(enc, dec, RatingScale.integer(1, k), seed)


@pytest.fixture
def toy_data():
    return make_dataset(8, 12, 30)


@pytest.fixture
def toy_params():
    return make_params()

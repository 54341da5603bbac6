import numpy as np
import pytest

from fbgan.volume import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_volume(shape=(2, 4, 4), fill=0.0, rng=None, lo=-1000.0, hi=1000.0, **kwargs):
    if rng is None:
        data = np.full(shape, fill, dtype=np.float32)
    else:
        data = rng.uniform(lo, hi, shape).astype(np.float32)
    return Volume(data=data, **kwargs)

import numpy as np
import pytest

from perfmap.volume import ScalarVolume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def vol(data, spacing=(1.0, 1.0, 1.0)):
    return ScalarVolume.from_array(np.asarray(data, dtype=np.float64), spacing)

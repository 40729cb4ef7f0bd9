import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from overseg.volume import LabelVolume, Mask2D

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def square(y, x, n, layer=0, label=1):
    return Mask2D(layer, np.array([(y + i, x + j) for i in range(n) for j in range(n)]), label)


def fig3_volume(with_blocker=False, dims=(9, 12, 12)):
    """Cell 1 on z 0..3 and cell 2 on z 5..8 over the same footprint, nothing at z=4."""
    data = np.zeros(dims, dtype=np.uint32)
    data[0:4, 3:9, 3:9] = 1
    data[5:9, 3:9, 3:9] = 2
    if with_blocker:
        data[4, 5:7, 5:7] = 3
    return LabelVolume(data)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

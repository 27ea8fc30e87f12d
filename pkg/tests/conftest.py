import numpy as np
import pytest

from talr.hamming import rank_by_distance
from talr.metrics import AffinityLevels


def random_instance(rng: np.random.Generator, max_items: int = 8, num_bits: int = 3, levels=(0, 1, 2)):
    """Small ranking with random distances and affinity levels, at least one positive."""
    n = int(rng.integers(1, max_items + 1))
    dist = rng.integers(0, num_bits + 1, n)
    lv = rng.choice(levels, n)
    if not np.any(lv > 0):
        lv[rng.integers(n)] = max(levels)
    return rank_by_distance(dist, num_bits), AffinityLevels(lv, levels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

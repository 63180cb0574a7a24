import numpy as np
import pytest

from evostack.search_space import FixedHyperparams, SearchSpace

DESK_FIXED = FixedHyperparams(hidden_dim=32, embed_dim=64, image_size=32, patch_size=8, channels=3)
TINY_FIXED = FixedHyperparams(hidden_dim=8, embed_dim=8, image_size=8, patch_size=4, channels=1)


def reduced_space(fixed=DESK_FIXED) -> SearchSpace:
    """Layers [1,3], heads {2,4}, mlp {8,16}, dropout {0.1}: 4 + 16 + 64 = 84 architectures."""
    return SearchSpace((2, 4), (8, 16), (0.1, 0.1), (1, 3), fixed)


@pytest.fixture
def space():
    return reduced_space()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

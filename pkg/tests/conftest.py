import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20251019)


def random_blocks(rng, n, spread=8.0):
    """Gaussian 32-element blocks with log-uniform magnitudes, plus sparse zeros."""
    mags = np.exp(rng.uniform(-spread, spread, size=(n, 1)))
    blocks = rng.standard_normal((n, 32)) * mags
    blocks[rng.random((n, 32)) < 0.02] = 0.0
    return blocks.astype(np.float32)

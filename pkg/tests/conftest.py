import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqdenoise.labels import EntitySet, build_label_set


@pytest.fixture
def per_loc():
    return build_label_set(EntitySet(("PER", "LOC")))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

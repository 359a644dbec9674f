import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_valid_boxes(rng: np.random.Generator, n: int, span: float = 100.0,
                       min_size: float = 0.5) -> np.ndarray:
    x1 = rng.uniform(0, span, n)
    y1 = rng.uniform(0, span, n)
    w = rng.uniform(min_size, span / 2, n)
    h = rng.uniform(min_size, span / 2, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)

import numpy as np
import pytest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def out_dir(tmp_path):
    """Scratch directory as a plain string path, the form smart_open callers pass around."""
    return str(tmp_path)

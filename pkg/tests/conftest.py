import os

import numpy as np
import pytest

os.environ.setdefault("CHIRALITY_ENV", "testing")

from src.tools.layout import build_layout, h36m17_layout, synthetic_layout  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pair_layout():
    """One mirror pair, one coordinate that flips sign."""
    return build_layout(["LW"], ["RW"], [], 1, {0})


@pytest.fixture
def center_layout():
    return build_layout([], [], ["Hip"], 3, {0})


@pytest.fixture
def h36m_2d():
    return h36m17_layout(dims=2, negated_dims=[0])


@pytest.fixture
def h36m_3d():
    return h36m17_layout(dims=3, negated_dims=[0])


@pytest.fixture
def small_layouts():
    """A spread of layouts up to 8 joints x 4 dims, including degenerate ones."""
    return [
        synthetic_layout(1, 0, 1, negated=1),
        synthetic_layout(2, 1, 2, negated=1),
        synthetic_layout(3, 2, 4, negated=2),
        synthetic_layout(3, 2, 3, negated=0),
        synthetic_layout(2, 2, 3, negated=3),
        synthetic_layout(0, 2, 2, negated=1),
    ]

import numpy as np
import pytest

from msflow.config.flow_config import FlowConfig
from msflow.getters.shapes import make_init, rectangle
from msflow.pipeline.grid_measure import Grid2D


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running desk-scale acceptance runs")


@pytest.fixture
def unit_grid():
    """8x8 grid with unit cells and cell (0, 0) at the origin."""
    return Grid2D(8, 8, 1.0)


@pytest.fixture
def small_grid():
    """16x16 grid of cell size 0.25 centred on the origin (domain 4x4)."""
    return Grid2D.centered(16, 16, 0.25)


@pytest.fixture
def fast_cfg():
    """Cheap configuration on a 16x16 grid for end-to-end tests."""
    return FlowConfig(
        h=0.05,
        n_steps=2,
        nx=16,
        ny=16,
        cell_size=0.25,
        outer_iters=4,
        inner_iters=30,
        eps_end=0.05,
        sinkhorn_max_iters=500,
        marginal_tol=1e-6,
        de_giorgi_samples=2,
        el_test_fields=2,
        cont_test_fields=3,
    )


@pytest.fixture
def square(small_grid):
    """Binary 4x4-cell square (unit area) in the middle of ``small_grid``."""
    return rectangle(small_grid, 1.0, 1.0)


@pytest.fixture
def disk(small_grid):
    return make_init("ball", small_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


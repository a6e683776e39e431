import numpy as np

from msflow.pipeline.grid_measure import DensityField


def random_binary(grid, n_cells, rng, margin=0):
    """Binary field with ``n_cells`` cells at random positions at least ``margin`` cells from the edge."""
    inner = np.zeros(grid.shape, dtype=bool)
    inner[margin:grid.nx - margin, margin:grid.ny - margin] = True
    candidates = np.flatnonzero(inner.ravel())
    values = np.zeros(grid.size)
    values[rng.choice(candidates, size=n_cells, replace=False)] = 1.0
    return DensityField(grid, values.reshape(grid.shape))


def block(grid, i0, j0, wi, wj, value=1.0):
    """Field equal to ``value`` on cells ``[i0, i0 + wi) x [j0, j0 + wj)``."""
    values = np.zeros(grid.shape)
    values[i0:i0 + wi, j0:j0 + wj] = value
    return DensityField(grid, values)


def random_density_pair(grid, rng, fill=0.5):
    """Two relaxed densities with the same multiset of values, hence equal mass."""
    values = rng.uniform(0.0, 1.0, grid.size) * (rng.uniform(size=grid.size) < fill)
    return (
        DensityField(grid, values.reshape(grid.shape)),
        DensityField(grid, rng.permutation(values).reshape(grid.shape)),
    )

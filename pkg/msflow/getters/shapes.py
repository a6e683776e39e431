"""Reference initial sets: balls, dumbbells, rectangles and random blobs."""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from msflow.pipeline.grid_measure import DensityField, Grid2D, normalize_mass
from msflow.utils.errors import InputError

logger = logging.getLogger("<MSFLOW>")

SHAPES = ("ball", "dumbbell", "rectangle")


def ball(grid: Grid2D, radius: float, center: Tuple[float, float] = (0.0, 0.0)) -> DensityField:
    """Cells whose centre lies within ``radius`` of ``center``."""
    X, Y = grid.centers()
    inside = (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius * radius
    return DensityField.from_mask(grid, inside)


def rectangle(
    grid: Grid2D, width: float, height: float, center: Tuple[float, float] = (0.0, 0.0)
) -> DensityField:
    """Axis-aligned rectangle; the sides snap to whole cells."""
    X, Y = grid.centers()
    inside = (np.abs(X - center[0]) < width / 2.0) & (np.abs(Y - center[1]) < height / 2.0)
    return DensityField.from_mask(grid, inside)


def dumbbell(grid: Grid2D, radius: float, separation: float, neck_width: float) -> DensityField:
    """Two balls centred at ``(+-separation / 2, 0)`` joined by a horizontal neck."""
    X, Y = grid.centers()
    half = separation / 2.0
    left = (X + half) ** 2 + Y**2 <= radius * radius
    right = (X - half) ** 2 + Y**2 <= radius * radius
    neck = (np.abs(X) <= half) & (np.abs(Y) <= neck_width / 2.0)
    return DensityField.from_mask(grid, left | right | neck)


def random_blobs(
    grid: Grid2D,
    n_cells: int,
    rng: np.random.Generator,
    smoothing_cells: float = 2.0,
    margin_cells: int = 2,
) -> DensityField:
    """
    Binary set of exactly ``n_cells`` cells: the top super-level set of
    smoothed white noise, kept ``margin_cells`` away from the grid edge.
    """
    noise = ndimage.gaussian_filter(rng.standard_normal(grid.shape), smoothing_cells)
    noise[:margin_cells, :] = noise[-margin_cells:, :] = -np.inf
    noise[:, :margin_cells] = noise[:, -margin_cells:] = -np.inf
    order = np.argsort(-noise.ravel(), kind="stable")
    out = np.zeros(grid.size)
    out[order[:n_cells]] = 1.0
    return DensityField(grid, out.reshape(grid.shape))


def make_init(shape: str, grid: Grid2D, target_mass: Optional[float] = 1.0) -> DensityField:
    """
    Reference initial set of (about) unit area centred in ``grid``; with
    ``target_mass`` set, the mass is rebalanced to it on whole cells.

    Raises:
        InputError: For an unknown shape name.
    """
    if shape == "ball":
        f = ball(grid, 1.0 / np.sqrt(np.pi))
    elif shape == "dumbbell":
        radius = 0.35
        f = dumbbell(grid, radius, separation=4.0 * radius, neck_width=0.4 * radius)
    elif shape == "rectangle":
        f = rectangle(grid, 1.25, 0.8)
    else:
        logger.error(f"Unknown shape '{shape}'")
        raise InputError(f"Unknown shape '{shape}', expected one of {SHAPES}")
    if target_mass is not None:
        f = normalize_mass(f, target_mass)
    return f

"""Discrete sets and densities on a uniform 2-D grid, and their mass geometry."""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from msflow import base_config
from msflow.utils.errors import GridMismatchError, InputError, MassMismatchError

logger = logging.getLogger("<MSFLOW>")

# solver round-off tolerated on the [0, 1] box before values are clipped
VALUE_TOL = 1e-9

DEFAULT_MASS_TOL = float(base_config["transport"]["mass_tol"])


@dataclass(frozen=True)
class Grid2D:
    """
    Uniform grid of square cells. Cell (i, j) is centred at
    ``origin + (i * cell_size, j * cell_size)``; ``i`` runs along x.
    """

    nx: int
    ny: int
    cell_size: float
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise InputError(f"Grid needs nx, ny >= 1, got ({self.nx}, {self.ny})")
        if not float(self.cell_size) > 0:
            raise InputError(f"Grid needs cell_size > 0, got {self.cell_size}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(
            self, "origin", (float(self.origin[0]), float(self.origin[1]))
        )

    @classmethod
    def centered(cls, nx: int, ny: int, cell_size: float) -> "Grid2D":
        """Grid whose domain is centred on the coordinate origin."""
        return cls(
            nx,
            ny,
            cell_size,
            (-(nx - 1) / 2.0 * cell_size, -(ny - 1) / 2.0 * cell_size),
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates along x and y."""
        xs = self.origin[0] + self.cell_size * np.arange(self.nx)
        ys = self.origin[1] + self.cell_size * np.arange(self.ny)
        return xs, ys

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinate arrays ``(X, Y)`` of shape ``(nx, ny)``."""
        xs, ys = self.axes()
        return np.meshgrid(xs, ys, indexing="ij")

    def flat_coordinates(self, flat_index: np.ndarray) -> np.ndarray:
        """Coordinates (n, 2) of the cells with the given C-order flat indices."""
        i, j = np.unravel_index(np.asarray(flat_index, dtype=np.int64), self.shape)
        return np.stack(
            [
                self.origin[0] + self.cell_size * i,
                self.origin[1] + self.cell_size * j,
            ],
            axis=1,
        )

    def refined(self, factor: int) -> "Grid2D":
        """Same physical domain covered by ``factor`` times more cells per axis."""
        half = self.cell_size / 2.0
        fine = self.cell_size / factor
        return Grid2D(
            self.nx * factor,
            self.ny * factor,
            fine,
            (self.origin[0] - half + fine / 2.0, self.origin[1] - half + fine / 2.0),
        )

    def scaled(self, factor: float) -> "Grid2D":
        """Dilate the whole grid (cell size and origin) by ``factor``."""
        return Grid2D(
            self.nx,
            self.ny,
            self.cell_size * factor,
            (self.origin[0] * factor, self.origin[1] * factor),
        )


@dataclass(frozen=True, eq=False)
class DensityField:
    """Relaxed indicator: per-cell volume fraction in [0, 1] on a ``Grid2D``."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.shape != self.grid.shape:
            raise InputError(
                f"Density values of shape {values.shape} do not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InputError("Density values must be finite")
        if values.size and (values.min() < -VALUE_TOL or values.max() > 1.0 + VALUE_TOL):
            raise InputError(
                f"Density values must lie in [0, 1], got [{values.min()}, {values.max()}]"
            )
        np.clip(values, 0.0, 1.0, out=values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "DensityField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_mask(cls, grid: Grid2D, mask: np.ndarray) -> "DensityField":
        return cls(grid, np.asarray(mask, dtype=bool).astype(np.float64))

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def support(self) -> np.ndarray:
        return self.values > 0.0

    def with_values(self, values: np.ndarray) -> "DensityField":
        return DensityField(self.grid, values)

    def cell_masses(self) -> np.ndarray:
        """Per-cell volume ``values * cell_area``."""
        return self.values * self.grid.cell_area


@dataclass(frozen=True, eq=False)
class FieldPair:
    """Two fields on the same grid whose masses agree within ``mass_tol`` (relative)."""

    a: DensityField
    b: DensityField
    mass_tol: float = DEFAULT_MASS_TOL

    def __post_init__(self):
        check_same_grid(self.a, self.b)
        check_equal_mass(self.a, self.b, self.mass_tol)


def check_same_grid(a: DensityField, b: DensityField) -> None:
    """Raise ``GridMismatchError`` unless both fields share one grid."""
    if a.grid != b.grid:
        logger.error(f"Grid mismatch: {a.grid} vs {b.grid}")
        raise GridMismatchError(f"Fields live on different grids: {a.grid} vs {b.grid}")


def check_equal_mass(a: DensityField, b: DensityField, mass_tol: float) -> None:
    """Raise ``MassMismatchError`` when the relative mass gap exceeds ``mass_tol``."""
    ma, mb = mass(a), mass(b)
    if abs(ma - mb) > mass_tol * max(ma, mb):
        logger.error(f"Mass mismatch: {ma!r} vs {mb!r} (mass_tol={mass_tol})")
        raise MassMismatchError(
            f"Fields must carry equal mass, got {ma!r} and {mb!r} (mass_tol={mass_tol})"
        )


def mass(f: DensityField) -> float:
    """Total volume ``sum(values) * cell_area``."""
    return float(f.values.sum() * f.grid.cell_area)


def symmetric_difference_volume(a: DensityField, b: DensityField) -> float:
    """L1 distance of two densities; equals ``|A △ B|`` for binary fields."""
    check_same_grid(a, b)
    return float(np.abs(a.values - b.values).sum() * a.grid.cell_area)


def second_moment(f: DensityField) -> float:
    """``sum(values * |x|^2) * cell_area`` with ``x`` the cell centre."""
    X, Y = f.grid.centers()
    return float((f.values * (X * X + Y * Y)).sum() * f.grid.cell_area)


def threshold_with_mass(
    f: DensityField, target_mass: float, mass_tol: float = DEFAULT_MASS_TOL
) -> DensityField:
    """
    Round a relaxed density to a binary field of (nearly) prescribed mass.

    Cells are taken by descending density value; ties go to the smaller
    C-order index, i.e. lexicographic ``(i, j)``. The number of cells is the
    whole-cell count closest to ``target_mass``.

    Args:
        f (DensityField): Relaxed density.
        target_mass (float): Desired volume.
        mass_tol (float): Relative tolerance on ``mass(f) - target_mass``;
            a larger gap is logged but does not stop the rounding.

    Returns:
        DensityField: Binary field.
    """
    area = f.grid.cell_area
    current = mass(f)
    if abs(current - target_mass) > mass_tol * max(abs(target_mass), area):
        logger.warning(
            f"Thresholding a field of mass {current!r} to target {target_mass!r}"
        )
    n_cells = int(np.clip(np.rint(target_mass / area), 0, f.grid.size))
    return _top_cells(f.grid, f.values, n_cells)


def _top_cells(grid: Grid2D, scores: np.ndarray, n_cells: int) -> DensityField:
    """Binary field on the ``n_cells`` highest scores; ties by C-order index."""
    order = np.argsort(-np.asarray(scores).ravel(), kind="stable")
    out = np.zeros(grid.size)
    out[order[:n_cells]] = 1.0
    return DensityField(grid, out.reshape(grid.shape))


def normalize_mass(f: DensityField, target_mass: float = 1.0) -> DensityField:
    """
    Binary field of mass ``target_mass`` (to one cell) obtained by eroding or
    dilating ``{f >= 1/2}`` uniformly: cells are ranked by signed distance to
    its boundary, the density value breaking ties. Geometry is not rescaled.

    Raises:
        InputError: If the target does not fit on the grid or ``f`` is empty.
    """
    grid = f.grid
    n_cells = int(np.rint(target_mass / grid.cell_area))
    if n_cells > grid.size or n_cells < 1:
        logger.error(f"Target mass {target_mass!r} needs {n_cells} cells on a {grid.shape} grid")
        raise InputError(
            f"Target mass {target_mass!r} needs {n_cells} cells, grid has {grid.size}"
        )
    if mass(f) <= 0:
        raise InputError("Cannot normalize an empty initial set")
    inside = f.values >= 0.5
    if not inside.any():
        inside = f.values >= f.values.max()
    signed = ndimage.distance_transform_edt(inside) - ndimage.distance_transform_edt(~inside)
    return _top_cells(grid, signed + f.values, n_cells)


def touches_boundary(f: DensityField, margin_cells: int = 1) -> bool:
    """True when the support comes within ``margin_cells`` of the grid edge."""
    support = f.support()
    if not support.any():
        return False
    m = max(int(margin_cells), 1)
    return bool(
        support[:m, :].any()
        or support[-m:, :].any()
        or support[:, :m].any()
        or support[:, -m:].any()
    )


def translate(f: DensityField, di: int, dj: int) -> DensityField:
    """Shift the pattern by ``(di, dj)`` cells; cells shifted in are empty."""
    out = np.zeros(f.grid.shape)
    nx, ny = f.grid.shape
    src_i = slice(max(0, -di), min(nx, nx - di))
    dst_i = slice(max(0, di), min(nx, nx + di))
    src_j = slice(max(0, -dj), min(ny, ny - dj))
    dst_j = slice(max(0, dj), min(ny, ny + dj))
    if src_i.start < src_i.stop and src_j.start < src_j.stop:
        out[dst_i, dst_j] = f.values[src_i, src_j]
    return DensityField(f.grid, out)


def kron_upsample(f: DensityField, factor: int) -> DensityField:
    """Represent the same set on ``grid.refined(factor)``."""
    values = np.kron(f.values, np.ones((factor, factor)))
    return DensityField(f.grid.refined(factor), values)

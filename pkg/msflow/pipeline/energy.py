"""
Interface energy of a relaxed indicator: discrete perimeter plus the
non-local interaction ``sum f * (k * f) * cell_area``, and the first variation
of that energy along a divergence-free vector field.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage, signal

from msflow import base_config
from msflow.getters.data_getter import load_kernel_csv
from msflow.pipeline.grid_measure import DensityField, Grid2D
from msflow.utils.errors import DivergenceError, InputError

logger = logging.getLogger("<MSFLOW>")

DEFAULT_MOLLIFIER_CELLS = int(base_config["energy"]["mollifier_cells"])
DEFAULT_DIV_TOL = float(base_config["energy"]["div_tol"])
GAUSSIAN_STD_CELLS = float(base_config["energy"]["default_gaussian_std_cells"])
GAUSSIAN_SUPPORT_CELLS = float(base_config["energy"]["default_gaussian_support_cells"])

# (x direction, y direction) of the one-sided gradient variants
TV_VARIANTS: Tuple[Tuple[str, str], ...] = (
    ("forward", "forward"),
    ("forward", "backward"),
    ("backward", "forward"),
    ("backward", "backward"),
)


def forward_diff(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    """``(u[i+1] - u[i]) / h``, zero in the last slice along ``axis``."""
    out = np.zeros_like(u, dtype=np.float64)
    n = u.shape[axis]
    lo = [slice(None)] * u.ndim
    hi = [slice(None)] * u.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    out[tuple(lo)] = (u[tuple(hi)] - u[tuple(lo)]) / h
    return out


def backward_diff(u: np.ndarray, axis: int, h: float) -> np.ndarray:
    """``(u[i] - u[i-1]) / h``, zero in the first slice along ``axis``."""
    out = np.zeros_like(u, dtype=np.float64)
    n = u.shape[axis]
    lo = [slice(None)] * u.ndim
    hi = [slice(None)] * u.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    out[tuple(hi)] = (u[tuple(hi)] - u[tuple(lo)]) / h
    return out


def forward_diff_adjoint(p: np.ndarray, axis: int, h: float) -> np.ndarray:
    q = np.moveaxis(np.array(p, dtype=np.float64, copy=True), axis, 0)
    q[-1] = 0.0
    out = -q.copy()
    out[1:] += q[:-1]
    return np.moveaxis(out, 0, axis) / h


def backward_diff_adjoint(p: np.ndarray, axis: int, h: float) -> np.ndarray:
    q = np.moveaxis(np.array(p, dtype=np.float64, copy=True), axis, 0)
    q[0] = 0.0
    out = q.copy()
    out[:-1] -= q[1:]
    return np.moveaxis(out, 0, axis) / h


_DIFF = {"forward": forward_diff, "backward": backward_diff}
_DIFF_ADJOINT = {"forward": forward_diff_adjoint, "backward": backward_diff_adjoint}


def gradient_variants(u: np.ndarray, h: float) -> List[np.ndarray]:
    """One ``(2, nx, ny)`` gradient per entry of ``TV_VARIANTS``."""
    return [
        np.stack([_DIFF[dx](u, 0, h), _DIFF[dy](u, 1, h)]) for dx, dy in TV_VARIANTS
    ]


def gradient_variants_adjoint(ps: List[np.ndarray], h: float) -> np.ndarray:
    """Adjoint of ``gradient_variants``: sum of the variant-wise negative divergences."""
    out = np.zeros(ps[0].shape[1:])
    for (dx, dy), p in zip(TV_VARIANTS, ps):
        out += _DIFF_ADJOINT[dx](p[0], 0, h) + _DIFF_ADJOINT[dy](p[1], 1, h)
    return out


def perimeter_tv(f: DensityField) -> float:
    """
    Isotropic total variation averaged over the four one-sided difference
    variants (forward/backward in x and y, Neumann at the edges).

    An interior ``a x b`` rectangle evaluates to ``2(a + b) - (2 - sqrt(2)) * cell_size``.
    The average is invariant under the symmetries of the square lattice.
    """
    return total_variation(f.values, f.grid.cell_size)


def total_variation(values: np.ndarray, cell_size: float) -> float:
    """Four-variant isotropic TV of any grid function (signed values allowed)."""
    total = 0.0
    for grad in gradient_variants(values, cell_size):
        total += np.sqrt((grad**2).sum(axis=0)).sum()
    return float(total / len(TV_VARIANTS) * cell_size * cell_size)


@dataclass(frozen=True, eq=False)
class Kernel:
    """
    Interaction kernel sampled on cell offsets. ``weights`` has odd shape and
    is centred on offset ``(0, 0)``; ``sum(weights) * cell_size**2`` is 1, or 0
    for the zero kernel.
    """

    weights: np.ndarray
    cell_size: float
    name: str = "custom"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise InputError(f"Kernel weights need an odd 2-D shape, got {w.shape}")
        if not np.all(np.isfinite(w)) or w.min() < 0:
            raise InputError("Kernel weights must be finite and nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_weights(cls, weights: np.ndarray, cell_size: float, name: str = "custom") -> "Kernel":
        """Symmetrize under ``z -> -z`` and renormalize to unit integral."""
        w = np.asarray(weights, dtype=np.float64)
        w = 0.5 * (w + w[::-1, ::-1])
        total = w.sum() * cell_size**2
        if total <= 0:
            raise InputError(f"Kernel '{name}' has no positive weight")
        return cls(w / total, cell_size, name)

    @classmethod
    def zero(cls, cell_size: float) -> "Kernel":
        return cls(np.zeros((1, 1)), cell_size, "none")

    @property
    def is_zero(self) -> bool:
        return not self.weights.any()

    def flipped(self) -> "Kernel":
        return Kernel(self.weights[::-1, ::-1].copy(), self.cell_size, self.name)

    def sup(self) -> float:
        return float(self.weights.max())

    def integral(self) -> float:
        return float(self.weights.sum() * self.cell_size**2)


def _offsets(radius_cells: int) -> Tuple[np.ndarray, np.ndarray]:
    r = np.arange(-radius_cells, radius_cells + 1)
    return np.meshgrid(r, r, indexing="ij")


def kernel_from_spec(spec: str, grid: Grid2D) -> Kernel:
    """
    Build a kernel from its configuration string.

    Accepted forms are ``none``, ``delta``, ``gaussian`` (std 4 cells,
    support 12 cells), ``gaussian:<std>`` (support 3 std), ``uniform:<radius>``
    (lengths in physical units) and a path to a ``dz_i,dz_j,weight`` CSV file.

    Raises:
        InputError: If the string names no known kernel or file.
    """
    cs = grid.cell_size
    if os.path.isfile(str(spec).strip()):
        path = str(spec).strip()
        return Kernel.from_weights(load_kernel_csv(path), cs, os.path.basename(path))

    name, _, arg = str(spec).strip().partition(":")
    name = name.strip().lower()
    try:
        value = float(arg) if arg else None
    except ValueError:
        raise InputError(f"Kernel parameter must be a number, got {spec!r}")
    if value is not None and name in ("gaussian", "uniform") and not value > 0:
        raise InputError(f"Kernel length must be positive, got {spec!r}")

    if name in ("none", "0", ""):
        return Kernel.zero(cs)
    if name == "delta":
        return Kernel.from_weights(np.ones((1, 1)), cs, "delta")
    if name == "gaussian":
        std = value if arg else GAUSSIAN_STD_CELLS * cs
        support = 3.0 * std if arg else GAUSSIAN_SUPPORT_CELLS * cs
        radius = max(int(np.ceil(support / cs)), 0)
        I, J = _offsets(radius)
        r2 = (I * I + J * J) * cs * cs
        w = np.exp(-r2 / (2.0 * std * std)) * (r2 <= support * support)
        return Kernel.from_weights(w, cs, f"gaussian:{std!r}")
    if name == "uniform":
        if not arg:
            raise InputError("Uniform kernel needs a radius, e.g. 'uniform:0.2'")
        radius_len = value
        radius = max(int(np.floor(radius_len / cs)), 0)
        I, J = _offsets(radius)
        w = ((I * I + J * J) * cs * cs <= radius_len * radius_len).astype(np.float64)
        return Kernel.from_weights(w, cs, f"uniform:{radius_len!r}")

    logger.error(f"Unknown kernel specification: {spec!r}")
    raise InputError(f"Unknown kernel specification: {spec!r}")


def convolve_kernel(f: DensityField, k: Kernel, method: str = "fft") -> np.ndarray:
    """Zero-padded ``(k * f)(x) = sum_z k(z) f(x - z) * cell_area`` on the grid."""
    if k.is_zero:
        return np.zeros(f.grid.shape)
    if method == "fft":
        out = signal.fftconvolve(f.values, k.weights, mode="same")
    elif method == "direct":
        out = signal.convolve(f.values, k.weights, mode="same", method="direct")
    else:
        raise ValueError(f"Unknown convolution method '{method}'")
    return out * f.grid.cell_area


def nonlocal_energy(f: DensityField, k: Kernel, method: str = "fft") -> float:
    """``sum f * (k * f) * cell_area``."""
    if k.is_zero:
        return 0.0
    value = float((f.values * convolve_kernel(f, k, method)).sum() * f.grid.cell_area)
    return max(value, 0.0)


@dataclass(frozen=True)
class EnergyBreakdown:
    perimeter: float
    nonlocal_: float

    @property
    def total(self) -> float:
        return self.perimeter + self.nonlocal_


def total_energy(f: DensityField, k: Kernel) -> EnergyBreakdown:
    return EnergyBreakdown(perimeter_tv(f), nonlocal_energy(f, k))


def node_divergence(vectors: np.ndarray, cell_size: float) -> np.ndarray:
    """
    Divergence on the ``(nx - 1, ny - 1)`` interior nodes: each 2x2 block of
    cells contributes the difference of its column (row) averages.
    """
    vx, vy = vectors[..., 0], vectors[..., 1]
    ddx = 0.5 * ((vx[1:, :-1] + vx[1:, 1:]) - (vx[:-1, :-1] + vx[:-1, 1:]))
    ddy = 0.5 * ((vy[:-1, 1:] + vy[1:, 1:]) - (vy[:-1, :-1] + vy[1:, :-1]))
    return (ddx + ddy) / cell_size


def _as_vectors(xi, grid: Grid2D) -> np.ndarray:
    vectors = np.asarray(getattr(xi, "vectors", xi), dtype=np.float64)
    if vectors.shape != grid.shape + (2,):
        raise InputError(f"Vector field of shape {vectors.shape} does not match grid {grid.shape}")
    return vectors


def check_divergence_free(xi, grid: Grid2D, div_tol: float = DEFAULT_DIV_TOL) -> float:
    """
    Sup of the node divergence; raise ``DivergenceError`` above
    ``div_tol * (1 + sup|xi| / cell_size)``.
    """
    vectors = _as_vectors(xi, grid)
    if min(grid.shape) < 2:
        return 0.0
    div = float(np.abs(node_divergence(vectors, grid.cell_size)).max())
    sup = float(np.sqrt((vectors**2).sum(axis=-1)).max())
    if div > div_tol * (1.0 + sup / grid.cell_size):
        logger.error(f"Test field divergence {div:.3e} exceeds div_tol={div_tol}")
        raise DivergenceError(f"Test field is not divergence-free: sup|div| = {div:.3e}")
    return div


@dataclass(frozen=True, eq=False)
class BoundaryMeasure:
    """Mollified indicator gradient: weight ``|grad chi|`` and outer normal ``nu``."""

    weight: np.ndarray
    normal: np.ndarray


def boundary_measure(f: DensityField, mollifier_cells: int = DEFAULT_MOLLIFIER_CELLS) -> BoundaryMeasure:
    cs = f.grid.cell_size
    smooth = ndimage.gaussian_filter(
        f.values, sigma=mollifier_cells / 2.0, truncate=2.0, mode="constant"
    )
    gx, gy = np.gradient(smooth, cs, cs)
    weight = np.sqrt(gx * gx + gy * gy)
    safe = np.where(weight > 0, weight, 1.0)
    normal = np.stack([-gx / safe, -gy / safe], axis=-1) * (weight > 0)[..., None]
    return BoundaryMeasure(weight, normal)


def first_variation(
    f: DensityField,
    k: Kernel,
    xi,
    mollifier_cells: int = DEFAULT_MOLLIFIER_CELLS,
    div_tol: float = DEFAULT_DIV_TOL,
) -> float:
    """
    Derivative of the energy along the flow of a divergence-free field ``xi``:
    ``sum (div xi - nu . Dxi nu + 2 (k * f) xi . nu) |grad chi| * cell_area``.

    Args:
        f (DensityField): Binary state.
        k (Kernel): Interaction kernel.
        xi: ``VelocityField`` or ``(nx, ny, 2)`` array of cell-centred vectors.
        mollifier_cells (int): Radius of the Gaussian mollifier in cells.
        div_tol (float): Divergence tolerance.

    Returns:
        float: The first variation.

    Raises:
        DivergenceError: If ``xi`` fails the divergence check.
    """
    grid = f.grid
    vectors = _as_vectors(xi, grid)
    check_divergence_free(vectors, grid, div_tol)
    if not vectors.any():
        return 0.0

    cs = grid.cell_size
    bm = boundary_measure(f, mollifier_cells)
    nu = bm.normal

    # jac[..., a, b] = d xi_a / d x_b
    jac = np.empty(grid.shape + (2, 2))
    for a in range(2):
        dxa, dya = np.gradient(vectors[..., a], cs, cs)
        jac[..., a, 0] = dxa
        jac[..., a, 1] = dya
    div = jac[..., 0, 0] + jac[..., 1, 1]
    nu_jac_nu = np.einsum("...a,...ab,...b->...", nu, jac, nu)
    xi_nu = (vectors * nu).sum(axis=-1)
    kf = convolve_kernel(f, k)

    integrand = (div - nu_jac_nu + 2.0 * kf * xi_nu) * bm.weight
    return float(integrand.sum() * grid.cell_area)


import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msflow.getters.shapes import ball
from msflow.pipeline.diagnostics import divergence_free_field, make_test_fields, stream_to_field
from msflow.pipeline.energy import (
    Kernel,
    check_divergence_free,
    convolve_kernel,
    first_variation,
    gradient_variants,
    gradient_variants_adjoint,
    kernel_from_spec,
    node_divergence,
    nonlocal_energy,
    perimeter_tv,
    total_energy,
    total_variation,
)
from msflow.pipeline.grid_measure import DensityField, Grid2D, mass
from msflow.utils.errors import DivergenceError, InputError
from tests.helpers import block, random_binary

seeds = st.integers(min_value=0, max_value=2**32 - 1)


@pytest.mark.parametrize("wi, wj", [(1, 1), (2, 3), (5, 4)])
def test_perimeter_of_interior_rectangle(wi, wj):
    cs = 0.25
    grid = Grid2D(12, 12, cs)
    f = block(grid, 3, 2, wi, wj)
    expected = 2 * (wi * cs + wj * cs) - (2 - np.sqrt(2)) * cs
    assert perimeter_tv(f) == pytest.approx(expected, rel=1e-12)


def test_perimeter_of_empty_and_full_fields(unit_grid):
    assert perimeter_tv(DensityField.zeros(unit_grid)) == 0.0
    assert perimeter_tv(DensityField(unit_grid, np.ones(unit_grid.shape))) == 0.0


@given(seed=seeds)
@settings(max_examples=20, deadline=None)
def test_perimeter_is_invariant_under_lattice_symmetries(seed):
    rng = np.random.default_rng(seed)
    grid = Grid2D(9, 9, 0.5)
    f = random_binary(grid, int(rng.integers(1, 40)), rng, margin=1)
    p = perimeter_tv(f)
    for values in (np.rot90(f.values), f.values.T, f.values[::-1, :]):
        assert perimeter_tv(DensityField(grid, values.copy())) == pytest.approx(p, rel=1e-12)


def test_perimeter_of_digital_disk_brackets_circumference():
    # staircase boundaries overestimate off the axes, by about 16% on average
    grid = Grid2D.centered(64, 64, 1.0 / 16)
    radius = 1.5
    p = perimeter_tv(ball(grid, radius))
    assert 0.95 * 2 * np.pi * radius <= p <= 1.25 * 2 * np.pi * radius


@given(seed=seeds)
@settings(max_examples=20, deadline=None)
def test_gradient_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((6, 7))
    ps = [rng.standard_normal((2, 6, 7)) for _ in range(4)]
    lhs = sum((g * p).sum() for g, p in zip(gradient_variants(u, 0.3), ps))
    rhs = (u * gradient_variants_adjoint(ps, 0.3)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_kernel_specs_are_normalized_and_symmetric(small_grid):
    for spec in ("delta", "gaussian", "gaussian:0.5", "uniform:0.6"):
        k = kernel_from_spec(spec, small_grid)
        assert k.integral() == pytest.approx(1.0)
        np.testing.assert_array_equal(k.weights, k.weights[::-1, ::-1])
        assert k.weights.shape[0] % 2 == 1


def test_zero_kernel(small_grid, disk):
    k = kernel_from_spec("none", small_grid)
    assert k.is_zero
    assert k.integral() == 0.0
    assert nonlocal_energy(disk, k) == 0.0
    assert total_energy(disk, k).total == pytest.approx(perimeter_tv(disk))


@pytest.mark.parametrize("spec", ["uniform", "gaussian:-1", "gaussian:abc", "triangle:0.1"])
def test_bad_kernel_specs(small_grid, spec):
    with pytest.raises(InputError):
        kernel_from_spec(spec, small_grid)


def test_kernel_rejects_even_or_negative_weights():
    with pytest.raises(InputError):
        Kernel(np.ones((2, 3)), 1.0)
    with pytest.raises(InputError):
        Kernel(-np.ones((3, 3)), 1.0)


def test_from_weights_symmetrizes():
    w = np.zeros((3, 3))
    w[2, 1] = 1.0
    k = Kernel.from_weights(w, 0.5)
    assert k.weights[2, 1] == k.weights[0, 1]
    assert k.integral() == pytest.approx(1.0)


def test_kernel_from_csv(tmp_path, small_grid):
    path = tmp_path / "kernel.csv"
    path.write_text("dz_i,dz_j,weight\n0,0,2.0\n1,0,1.0\n-1,0,1.0\n")
    k = kernel_from_spec(str(path), small_grid)
    assert k.weights.shape == (3, 1)
    assert k.integral() == pytest.approx(1.0)
    assert k.weights[1, 0] == pytest.approx(2 * k.weights[0, 0])


def test_fft_and_direct_convolution_agree(small_grid, rng):
    f = random_binary(small_grid, 60, rng)
    k = kernel_from_spec("gaussian:0.4", small_grid)
    np.testing.assert_allclose(
        convolve_kernel(f, k, "fft"), convolve_kernel(f, k, "direct"), atol=1e-12
    )
    with pytest.raises(ValueError):
        convolve_kernel(f, k, "spectral")


def test_delta_kernel_energy_is_mass_of_binary_set(small_grid, disk):
    k = kernel_from_spec("delta", small_grid)
    assert nonlocal_energy(disk, k) == pytest.approx(mass(disk))


@given(seed=seeds)
@settings(max_examples=15, deadline=None)
def test_nonlocal_energy_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    grid = Grid2D.centered(12, 12, 0.25)
    f = DensityField(grid, rng.uniform(size=grid.shape))
    assert nonlocal_energy(f, kernel_from_spec("uniform:0.5", grid)) >= 0.0


def test_stream_function_fields_are_divergence_free(small_grid, rng):
    psi = rng.standard_normal((small_grid.nx + 1, small_grid.ny + 1))
    vectors = stream_to_field(psi, small_grid.cell_size)
    assert np.abs(node_divergence(vectors, small_grid.cell_size)).max() <= 1e-10 * np.abs(vectors).max()
    for spec in make_test_fields(3, small_grid, seed=1):
        assert check_divergence_free(divergence_free_field(spec, small_grid), small_grid) <= 1e-10


def test_first_variation_of_zero_field(small_grid, disk):
    k = kernel_from_spec("gaussian:0.5", small_grid)
    assert first_variation(disk, k, np.zeros(small_grid.shape + (2,))) == 0.0


def test_first_variation_rejects_compressible_field(small_grid, disk):
    X, _ = small_grid.centers()
    xi = np.stack([X, np.zeros_like(X)], axis=-1)
    with pytest.raises(DivergenceError):
        first_variation(disk, Kernel.zero(small_grid.cell_size), xi)


def test_first_variation_rejects_wrong_shape(small_grid, disk):
    with pytest.raises(InputError):
        first_variation(disk, Kernel.zero(small_grid.cell_size), np.zeros((3, 3, 2)))


def test_first_variation_vanishes_for_rigid_motions(small_grid, disk):
    k = Kernel.zero(small_grid.cell_size)
    X, Y = small_grid.centers()
    translation = np.stack([np.ones_like(X), np.zeros_like(X)], axis=-1)
    rotation = np.stack([-Y, X], axis=-1)
    assert first_variation(disk, k, translation) == pytest.approx(0.0, abs=1e-12)
    assert first_variation(disk, k, rotation) == pytest.approx(0.0, abs=1e-12)


def test_first_variation_is_linear_in_the_field(small_grid, disk):
    k = kernel_from_spec("gaussian:0.5", small_grid)
    a, b = (divergence_free_field(s, small_grid) for s in make_test_fields(2, small_grid, seed=4))
    combined = first_variation(disk, k, 2.0 * a - b)
    assert combined == pytest.approx(
        2.0 * first_variation(disk, k, a) - first_variation(disk, k, b), rel=1e-9, abs=1e-12
    )


def test_nonlocal_energy_matches_brute_force_double_sum(rng):
    grid = Grid2D(8, 8, 0.25)
    f = DensityField(grid, rng.uniform(size=grid.shape))
    k = kernel_from_spec("gaussian:0.3", grid)
    r = k.weights.shape[0] // 2
    total = 0.0
    for i in range(8):
        for j in range(8):
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    if 0 <= i - a < 8 and 0 <= j - b < 8:
                        total += f.values[i, j] * k.weights[a + r, b + r] * f.values[i - a, j - b]
    assert nonlocal_energy(f, k) == pytest.approx(total * grid.cell_area**2, rel=1e-10)
    assert nonlocal_energy(f, k.flipped()) == pytest.approx(nonlocal_energy(f, k), rel=1e-12)


@given(seed=seeds)
@settings(max_examples=15, deadline=None)
def test_nonlocal_energy_is_lipschitz_in_l1(seed):
    rng = np.random.default_rng(seed)
    grid = Grid2D.centered(10, 10, 0.25)
    f = DensityField(grid, rng.uniform(size=grid.shape))
    g = DensityField(grid, rng.uniform(size=grid.shape))
    k = kernel_from_spec("uniform:0.5", grid)
    l1 = np.abs(f.values - g.values).sum() * grid.cell_area
    assert abs(nonlocal_energy(f, k) - nonlocal_energy(g, k)) <= 2 * l1 + 1e-12


def test_total_energy_of_rectangle_with_delta_kernel():
    grid = Grid2D(12, 12, 0.25)
    f = block(grid, 3, 3, 4, 2)
    energy = total_energy(f, kernel_from_spec("delta", grid))
    assert energy.perimeter == pytest.approx(2 * (1.0 + 0.5) - (2 - np.sqrt(2)) * 0.25)
    assert energy.nonlocal_ == pytest.approx(mass(f))
    assert energy.total == energy.perimeter + energy.nonlocal_


def _jacobian_sup(vectors, cell_size):
    rows = [g for a in range(2) for g in np.gradient(vectors[..., a], cell_size, cell_size)]
    return float(np.sqrt(sum(g * g for g in rows)).max())


@pytest.fixture
def fine_grid():
    return Grid2D.centered(128, 128, 0.025)


def _bump(X, Y):
    return 0.9 * np.exp(-(((X - 0.15) / 0.55) ** 2) - ((Y + 0.1) / 0.35) ** 2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_first_variation_matches_advected_energy(fine_grid, seed):
    k = kernel_from_spec("gaussian:0.2", fine_grid)
    X, Y = fine_grid.centers()
    f = DensityField(fine_grid, _bump(X, Y))
    xi = divergence_free_field(make_test_fields(1, fine_grid, seed=seed)[0], fine_grid)
    eps = 1e-3

    def advected(s):
        return total_energy(DensityField(fine_grid, _bump(X - s * xi[..., 0], Y - s * xi[..., 1])), k).total

    numeric = (advected(eps) - advected(-eps)) / (2 * eps)
    scale = _jacobian_sup(xi, fine_grid.cell_size) * perimeter_tv(f)
    assert first_variation(f, k, xi, mollifier_cells=1) == pytest.approx(numeric, rel=0.05, abs=0.01 * scale)


@pytest.mark.parametrize("seed", [0, 3, 7, 11])
def test_first_variation_of_a_disk_nearly_vanishes(fine_grid, seed):
    disk = ball(fine_grid, 0.6)
    xi = divergence_free_field(make_test_fields(1, fine_grid, seed=seed)[0], fine_grid)
    value = first_variation(disk, Kernel.zero(fine_grid.cell_size), xi, mollifier_cells=4)
    assert abs(value) <= 0.05 * _jacobian_sup(xi, fine_grid.cell_size) * perimeter_tv(disk)


@given(seed=seeds)
@settings(max_examples=25, deadline=None)
def test_total_variation_is_a_seminorm(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 9, 7))

    def tv(u):
        return total_variation(u, 0.5)

    assert abs(tv(a) - tv(b)) <= tv(a - b) + 1e-12
    assert tv(0.5 * (a + b)) <= 0.5 * (tv(a) + tv(b)) + 1e-12
    assert tv(-3.0 * a) == pytest.approx(3.0 * tv(a))
    assert tv(a + 2.0) == pytest.approx(tv(a))


@given(seed=seeds)
@settings(max_examples=20, deadline=None)
def test_perimeter_converges_along_vanishing_perturbations(seed):
    rng = np.random.default_rng(seed)
    grid = Grid2D(10, 10, 0.5)
    f = random_binary(grid, 30, rng)
    noise = rng.uniform(-1.0, 1.0, grid.shape)
    bound = total_variation(noise, grid.cell_size)
    for n in (1, 4, 16, 64):
        gap = abs(total_variation(f.values + noise / n, grid.cell_size) - perimeter_tv(f))
        assert gap <= bound / n + 1e-12

"""
Desk-scale acceptance runs. Deselected by default; run with ``pytest -m acceptance``.
"""

import os

import numpy as np
import pytest

from msflow.config.flow_config import load_flow_config
from msflow.getters.shapes import make_init
from msflow.pipeline import diagnostics
from msflow.pipeline.grid_measure import Grid2D, mass, symmetric_difference_volume
from msflow.pipeline.jko import jko_step, run_flow
from msflow.pipeline.pipeline_manager import make_init_file, pipeline_run
from msflow.pipeline.transport import TransportSettings, exact_ot, sinkhorn_ot
from tests.helpers import random_binary

pytestmark = pytest.mark.acceptance

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.fixture(scope="module")
def dumbbell_ledger():
    cfg = load_flow_config(os.path.join(CONFIGS, "dumbbell.cfg"))
    return run_flow(make_init("dumbbell", cfg.grid()), cfg)


def test_sinkhorn_agrees_with_exact_on_fifty_pairs():
    rng = np.random.default_rng(2024)
    grid = Grid2D.centered(16, 16, 1.0 / 16)
    fine = TransportSettings(eps_end=1e-3, marginal_tol=1e-9, max_iters=20000)
    for _ in range(50):
        n_cells = int(rng.integers(4, 65))
        a = random_binary(grid, n_cells, rng)
        b = random_binary(grid, n_cells, rng)
        exact = exact_ot(a, b).cost_value
        plan, _ = sinkhorn_ot(a, b, settings=fine, debias=False)
        assert plan.cost_value == pytest.approx(exact, rel=1e-4)


def test_dumbbell_dissipation_and_mass(dumbbell_ledger):
    cfg = dumbbell_ledger.config
    frame = dumbbell_ledger.to_frame()
    assert dumbbell_ledger.error is None
    assert dumbbell_ledger.n_steps == 50
    report = diagnostics.check_dissipation_ledger(frame, cfg.h, cfg.accept_slack)
    assert report.passed, report.failed_checks()
    energies = frame["total_energy"].to_numpy()
    assert np.all(np.diff(energies) <= cfg.accept_slack * energies[:-1] + 1e-12)
    assert np.all(np.abs(frame["mass"] - 1.0) <= cfg.grid().cell_area)


def test_dumbbell_holder_exponents(dumbbell_ledger):
    cfg = dumbbell_ledger.config
    states = dict(enumerate(dumbbell_ledger.states))
    energy0 = float(dumbbell_ledger.to_frame()["total_energy"].iloc[0])
    report = diagnostics.check_holder_curves(states, cfg.h, energy0, cfg.accept_slack, workers=4)
    frame = report.to_frame()
    for check in ("holder_w2_exponent", "holder_l1_exponent", "holder_w2_bound"):
        assert frame.loc[frame["check"] == check, "pass"].all()


def test_dumbbell_step_residuals(dumbbell_ledger):
    frame = dumbbell_ledger.to_frame()
    assert (frame["cont_residual"].iloc[1:] <= 1.0).all()
    report = diagnostics.check_flow(dumbbell_ledger)
    failed = set(report.failed_checks())
    assert not failed & {"slope_lower_bound", "continuity_equation", "euler_lagrange"}


def test_ball_is_nearly_stationary():
    cfg = load_flow_config(os.path.join(CONFIGS, "ball.cfg"))
    disk = make_init("ball", cfg.grid())
    state, _ = jko_step(disk, cfg)
    assert symmetric_difference_volume(state, disk) <= 0.02 * mass(disk)


def test_interpolation_corpus_below_frozen_constant():
    fits = diagnostics.frozen_fits["interpolation"]
    n = int(fits["corpus_grid"])
    grid = Grid2D.centered(n, n, 1.0 / n)
    corpus = diagnostics.interpolation_corpus(int(fits["corpus_seed"]), int(fits["corpus_pairs"]), grid)
    first = diagnostics.check_interpolation_inequality(corpus)
    again = diagnostics.check_interpolation_inequality(corpus)
    assert first.max_value("interpolation_ratio") <= diagnostics.c_fit()
    assert first.max_value("interpolation_ratio") == again.max_value("interpolation_ratio")


def test_disk_euler_lagrange_residual_order():
    resolutions = (64, 128, 256)
    residuals = [diagnostics.disk_el_residual(n) for n in resolutions]
    sizes = [3.2 / n for n in resolutions]
    assert residuals[0] > residuals[1] > residuals[2]
    order = np.polyfit(np.log(sizes), np.log(residuals), 1)[0]
    assert order >= 0.5


def test_runs_are_byte_identical(tmp_path):
    cfg = load_flow_config(os.path.join(CONFIGS, "dumbbell.cfg")).replace(n_steps=2)
    init = tmp_path / "dumbbell.pgm"
    make_init_file("dumbbell", cfg.grid(), str(init))
    pipeline_run(None, str(init), str(tmp_path / "a"), cfg=cfg)
    pipeline_run(None, str(init), str(tmp_path / "b"), cfg=cfg)
    first = (tmp_path / "a" / "ledger.csv").read_bytes()
    assert first == (tmp_path / "b" / "ledger.csv").read_bytes()


def test_frozen_fits_are_reproducible(tmp_path):
    pending = diagnostics.uncalibrated_sections()
    if pending:
        pytest.skip(f"frozen fits {pending} not calibrated yet; run `msflow calibrate`")
    fits = diagnostics.frozen_fits
    el = fits["euler_lagrange"]
    again = diagnostics.calibrate_frozen_fits(
        str(tmp_path / "frozen_fits.yaml"),
        el_points=list(zip(el["cell_sizes"], el["residuals"])),
        holder_ratio=fits["holder_l1"]["reference_ratio"],
    )
    assert again["interpolation"]["c_fit"] == pytest.approx(fits["interpolation"]["c_fit"], rel=1e-9)
    for cell_size, residual in zip(el["cell_sizes"], el["residuals"]):
        resolution = int(round(3.2 / cell_size))
        assert diagnostics.disk_el_residual(resolution) == pytest.approx(residual, rel=1e-6)


def _holder_prefactor(ledger):
    cfg = ledger.config
    energy0 = float(ledger.to_frame()["total_energy"].iloc[0])
    report = diagnostics.check_holder_curves(
        dict(enumerate(ledger.states)), cfg.h, energy0, cfg.accept_slack, min_steps=10, workers=4
    )
    frame = report.to_frame()
    assert frame.loc[frame["check"] == "holder_w2_bound", "pass"].all()
    values = report.values("holder_w2_prefactor")
    return float(values[0]) if values.size else 0.0, energy0


def test_holder_prefactor_follows_initial_energy(dumbbell_ledger):
    cfg = load_flow_config(os.path.join(CONFIGS, "ball.cfg")).replace(n_steps=10)
    ball_ledger = run_flow(make_init("ball", cfg.grid()), cfg)
    ball_prefactor, ball_energy = _holder_prefactor(ball_ledger)
    dumbbell_prefactor, dumbbell_energy = _holder_prefactor(dumbbell_ledger)
    assert dumbbell_energy > ball_energy
    assert dumbbell_prefactor > ball_prefactor

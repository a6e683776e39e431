import pytest

from msflow.config.flow_config import FlowConfig, load_flow_config, parse_flow_config
from msflow.pipeline.grid_measure import Grid2D
from msflow.utils.errors import InputError


def test_defaults_come_from_base_yaml():
    cfg = FlowConfig()
    assert cfg.h == 0.05
    assert (cfg.nx, cfg.ny, cfg.cell_size) == (64, 64, 0.05)
    assert cfg.kernel == "none"
    assert cfg.normalize is True


def test_parse_flat_keys():
    text = """
    # dumbbell
    h = 0.01
    n_steps = 50
    grid.nx = 128
    grid.cell_size = 0.025   # inline comment
    kernel = gaussian:0.1
    eps.end = 1e-4
    normalize = false
    """
    cfg = parse_flow_config(text)
    assert cfg.h == 0.01
    assert cfg.n_steps == 50
    assert cfg.nx == 128
    assert cfg.ny == 64
    assert cfg.cell_size == 0.025
    assert cfg.kernel == "gaussian:0.1"
    assert cfg.eps_end == 1e-4
    assert cfg.normalize is False


@pytest.mark.parametrize(
    "text",
    [
        "hh = 0.1",
        "h = 0.1\nh = 0.2",
        "h 0.1",
        "h = abc",
        "n_steps = 2.5",
        "normalize = maybe",
        "h = -1",
        "grid.nx = 0",
        "n_steps = -1",
        "eps.decay = 1.5",
        "eps.start = 1e-4\neps.end = 1e-3",
        "grid.origin_x = 0.0",
    ],
)
def test_bad_config_text(text):
    with pytest.raises(InputError):
        parse_flow_config(text)


def test_to_text_round_trip():
    cfg = FlowConfig(h=0.0125, n_steps=3, kernel="uniform:0.2", normalize=False, origin_x=-1.0, origin_y=0.5)
    assert parse_flow_config(cfg.to_text()) == cfg


def test_load_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_flow_config(str(tmp_path / "absent.cfg"))
    assert load_flow_config(None) == FlowConfig()


def test_load_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("h = 0.32\nn_steps = 10\n")
    cfg = load_flow_config(str(path))
    assert (cfg.h, cfg.n_steps) == (0.32, 10)


def test_sample_times_and_slope_columns():
    cfg = FlowConfig(h=0.08, de_giorgi_samples=4)
    assert cfg.sample_times() == [0.01, 0.02, 0.04, 0.08]
    assert cfg.slope_columns() == ["slope_h8", "slope_h4", "slope_h2", "slope_h"]
    assert FlowConfig(de_giorgi_samples=1).slope_columns() == ["slope_h"]


def test_grid_and_refinement():
    cfg = FlowConfig(nx=10, ny=6, cell_size=0.5)
    assert cfg.grid() == Grid2D.centered(10, 6, 0.5)
    fine = cfg.refined(2)
    assert (fine.nx, fine.ny, fine.cell_size) == (20, 12, 0.25)
    assert fine.h == cfg.h
    shifted = FlowConfig(nx=4, ny=4, cell_size=1.0, origin_x=0.0, origin_y=0.0)
    assert shifted.grid().origin == (0.0, 0.0)
    assert shifted.refined(2).grid().origin == pytest.approx((-0.25, -0.25))


def test_transport_settings_carry_tolerances():
    cfg = FlowConfig(marginal_tol=1e-5, exact_ot_cell_cap=100)
    settings = cfg.transport_settings()
    assert settings.marginal_tol == 1e-5
    assert settings.cell_cap == 100


def test_package_defaults_survive_importing_the_config_package():
    import types

    import msflow
    import msflow.config.flow_config  # noqa: F401
    import msflow.config.logging_system  # noqa: F401

    assert isinstance(msflow.config, types.ModuleType)
    assert isinstance(msflow.base_config, dict)
    assert isinstance(msflow.frozen_fits, dict)
    assert FlowConfig().h == float(msflow.base_config["flow"]["h"])


def test_relaxed_transport_keys():
    cfg = parse_flow_config(
        "eps.relaxed_end = 0.1\nrelaxed_marginal_tol = 1e-3\n"
        "relaxed_sinkhorn_iters = 40\nexact_assignment_cell_cap = 500\n"
    )
    relaxed = cfg.relaxed_transport_settings()
    assert (relaxed.eps_end, relaxed.marginal_tol, relaxed.max_iters) == (0.1, 1e-3, 40)
    assert relaxed.eps_start == cfg.eps_start
    assert cfg.transport_settings().assignment_cell_cap == 500
    with pytest.raises(InputError):
        parse_flow_config("eps.start = 0.5\neps.relaxed_end = 0.6\n")

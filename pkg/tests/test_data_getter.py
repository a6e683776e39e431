import json

import numpy as np
import pandas as pd
import pytest

from msflow.getters.data_getter import (
    is_valid_format,
    load_csv_set,
    load_init_set,
    load_kernel_csv,
    load_ledger,
    load_pgm,
    load_snapshots,
)
from msflow.getters.shapes import SHAPES, make_init, random_blobs
from msflow.pipeline.grid_measure import Grid2D, mass
from msflow.utils.errors import InputError
from msflow.utils.helper import sha256_file, write_frame_csv, write_pgm
from tests.helpers import block, random_binary


def test_pgm_orientation(tmp_path):
    path = tmp_path / "set.pgm"
    # 3 wide, 2 high; the top row is j = 1
    path.write_text("P2\n# comment\n3 2\n255\n0 0 255\n255 0 0\n")
    values = load_pgm(str(path))
    assert values.shape == (3, 2)
    assert values[2, 1] == 1.0
    assert values[0, 0] == 1.0
    assert values.sum() == 2.0


def test_write_pgm_is_inverse_of_load(tmp_path, rng):
    grid = Grid2D(7, 5, 0.5)
    f = random_binary(grid, 12, rng)
    path = tmp_path / "state.pgm"
    write_pgm(f.values, str(path))
    np.testing.assert_array_equal(load_pgm(str(path)), f.values)


@pytest.mark.parametrize(
    "text", ["P5\n2 2\n255\n0 0 0 0\n", "P2\n2 2\n255\n0 0 0\n", "P2\nx 2\n255\n", ""]
)
def test_malformed_pgm(tmp_path, text):
    path = tmp_path / "bad.pgm"
    path.write_text(text)
    with pytest.raises(InputError):
        load_pgm(str(path))


@pytest.mark.parametrize(
    "raw", [b"P5\n2 2\n255\n\x00\xff\xfe\x80", b"P2\n\xff\xfe\n", b"P2\n-2 -3\n255\n0 0 0 0 0 0\n"]
)
def test_binary_or_degenerate_pgm_is_an_input_error(tmp_path, raw):
    path = tmp_path / "bad.pgm"
    path.write_bytes(raw)
    with pytest.raises(InputError):
        load_pgm(str(path))


def test_csv_set(tmp_path):
    path = tmp_path / "set.csv"
    path.write_text("i,j,value\n0,1,1\n2,0,0.5\n")
    values = load_csv_set(str(path), 3, 2)
    assert values[0, 1] == 1.0
    assert values[2, 0] == 0.5
    assert values.sum() == 1.5


@pytest.mark.parametrize("text", ["a,b\n1,2\n", "i,j,value\n5,0,1\n", ""])
def test_bad_csv_set(tmp_path, text):
    path = tmp_path / "set.csv"
    path.write_text(text)
    with pytest.raises(InputError):
        load_csv_set(str(path), 3, 2)


def test_load_init_set(tmp_path, small_grid, square):
    path = tmp_path / "square.pgm"
    write_pgm(square.values, str(path))
    loaded = load_init_set(str(path), small_grid)
    np.testing.assert_array_equal(loaded.values, square.values)
    with pytest.raises(InputError):
        load_init_set(str(path), Grid2D.centered(8, 8, 0.5))
    with pytest.raises(InputError):
        load_init_set(str(tmp_path / "absent.pgm"), small_grid)
    other = tmp_path / "square.txt"
    other.write_text("P2\n")
    assert not is_valid_format(str(other))
    with pytest.raises(InputError):
        load_init_set(str(other), small_grid)


def test_kernel_csv_centres_offsets(tmp_path):
    path = tmp_path / "k.csv"
    path.write_text("dz_i,dz_j,weight\n0,0,1\n2,-1,3\n")
    weights = load_kernel_csv(str(path))
    assert weights.shape == (5, 3)
    assert weights[2, 1] == 1.0
    assert weights[4, 0] == 3.0


def _write_run(run_dir, frame):
    write_frame_csv(frame, str(run_dir / "ledger.csv"))
    (run_dir / "manifest.json").write_text(json.dumps({"version": "0.1.0"}))


def test_load_ledger(tmp_path):
    frame = pd.DataFrame({"n": [0, 1], "total_energy": [4.0, 3.5]})
    _write_run(tmp_path, frame)
    ledger, solver_log, manifest = load_ledger(str(tmp_path))
    pd.testing.assert_frame_equal(ledger, frame, check_dtype=False)
    assert solver_log.empty
    assert manifest["version"] == "0.1.0"


def test_load_ledger_rejects_broken_runs(tmp_path):
    with pytest.raises(InputError):
        load_ledger(str(tmp_path))
    _write_run(tmp_path, pd.DataFrame({"n": [0], "total_energy": ["oops"]}))
    with pytest.raises(InputError):
        load_ledger(str(tmp_path))
    (tmp_path / "ledger.csv").write_text("n,total_energy\n")
    with pytest.raises(InputError):
        load_ledger(str(tmp_path))
    (tmp_path / "ledger.csv").write_text("n\n0\n")
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(InputError):
        load_ledger(str(tmp_path))


def test_load_snapshots(tmp_path, small_grid, square):
    write_pgm(square.values, str(tmp_path / "state_000000.pgm"))
    write_pgm(block(small_grid, 0, 0, 2, 2).values, str(tmp_path / "state_000004.pgm"))
    (tmp_path / "state_final.pgm").write_text("P2\n")
    states = load_snapshots(str(tmp_path), small_grid)
    assert sorted(states) == [0, 4]
    np.testing.assert_array_equal(states[0].values, square.values)


def test_sha256_changes_with_content(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text("a")
    first = sha256_file(str(path))
    path.write_text("b")
    assert sha256_file(str(path)) != first


@pytest.mark.parametrize("shape", SHAPES)
def test_reference_shapes_have_unit_mass(shape):
    grid = Grid2D.centered(64, 64, 0.05)
    f = make_init(shape, grid)
    assert f.is_binary
    assert abs(mass(f) - 1.0) <= grid.cell_area


def test_unknown_shape(small_grid):
    with pytest.raises(InputError):
        make_init("torus", small_grid)


def test_random_blobs_have_exact_cell_count(small_grid, rng):
    f = random_blobs(small_grid, 20, rng)
    assert int(f.values.sum()) == 20
    assert not f.values[:2, :].any() and not f.values[:, -2:].any()

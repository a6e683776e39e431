import json
import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from msflow import base_config
from msflow.pipeline.grid_measure import DensityField, Grid2D
from msflow.utils.errors import InputError

logger = logging.getLogger("<MSFLOW>")

VALID_INIT_EXTENSIONS = (".pgm", ".csv")


def is_valid_format(file_path: str) -> bool:
    """True when the file exists and carries a supported initial-set extension."""
    return os.path.isfile(file_path) and file_path.lower().endswith(VALID_INIT_EXTENSIONS)


def _pgm_tokens(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        yield from line.split()


def load_pgm(file_path: str) -> np.ndarray:
    """
    Read an ASCII (P2) PGM bitmap as an ``(nx, ny)`` 0/1 array.

    Column ``c`` maps to cell index ``i = c``; row ``r`` (top first) maps to
    ``j = height - 1 - r`` so that ``j`` grows upwards. Nonzero pixels are 1.

    Args:
        file_path (str): Path of the bitmap.

    Returns:
        np.ndarray: Indicator values indexed ``[i, j]``.

    Raises:
        InputError: If the file is not a well-formed P2 bitmap.
    """
    try:
        with open(file_path, "r", encoding="ascii") as file:
            tokens = list(_pgm_tokens(file.read()))
    except UnicodeDecodeError as e:
        logger.error(f"{file_path} is not a text file; binary (P5) PGM is not supported")
        raise InputError(f"{file_path} is not an ASCII PGM (P2) file") from e
    if not tokens or tokens[0] != "P2":
        logger.error(f"{file_path} is not an ASCII PGM (P2) file")
        raise InputError(f"{file_path} is not an ASCII PGM (P2) file")
    try:
        width, height, _maxval = (int(t) for t in tokens[1:4])
        pixels = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as e:
        raise InputError(f"Malformed PGM header or pixel data in {file_path}") from e
    if width < 1 or height < 1:
        raise InputError(f"{file_path}: invalid PGM size {width}x{height}")
    if pixels.size != width * height:
        raise InputError(
            f"{file_path}: expected {width * height} pixels, found {pixels.size}"
        )
    image = pixels.reshape(height, width)
    return (image[::-1, :].T != 0).astype(np.float64)


def load_csv_set(file_path: str, nx: int, ny: int) -> np.ndarray:
    """Read ``i,j,value`` rows into an ``(nx, ny)`` array; absent cells are 0."""
    try:
        df = pd.read_csv(file_path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise InputError(f"Unreadable CSV set {file_path}: {e}") from e
    missing = {"i", "j", "value"} - set(df.columns)
    if missing:
        raise InputError(f"{file_path} lacks columns {sorted(missing)}")
    i = df["i"].to_numpy(dtype=np.int64)
    j = df["j"].to_numpy(dtype=np.int64)
    if i.size and (i.min() < 0 or j.min() < 0 or i.max() >= nx or j.max() >= ny):
        raise InputError(f"{file_path} has cell indices outside a {nx}x{ny} grid")
    values = np.zeros((nx, ny))
    values[i, j] = df["value"].to_numpy(dtype=np.float64)
    return values


def load_init_set(file_path: str, grid: Grid2D) -> DensityField:
    """
    Load an initial set from PGM or CSV onto ``grid``.

    Raises:
        InputError: If the file is missing, has an unsupported type, or does
            not match the grid shape.
    """
    if not os.path.isfile(file_path):
        logger.error(f"Initial set not found: {file_path}")
        raise InputError(f"Initial set not found: {file_path}")
    if not is_valid_format(file_path):
        raise InputError(f"{file_path} must be one of {VALID_INIT_EXTENSIONS}")

    logger.info(f"Loading initial set from {file_path}")
    if file_path.lower().endswith(".pgm"):
        values = load_pgm(file_path)
    else:
        values = load_csv_set(file_path, grid.nx, grid.ny)
    if values.shape != grid.shape:
        raise InputError(
            f"{file_path} has shape {values.shape}, config grid is {grid.shape}"
        )
    return DensityField(grid, values)


def load_kernel_csv(file_path: str) -> np.ndarray:
    """
    Read ``dz_i,dz_j,weight`` rows into a centred, odd-shaped weight array.
    Offsets missing from the file get weight 0.
    """
    try:
        df = pd.read_csv(file_path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise InputError(f"Unreadable kernel CSV {file_path}: {e}") from e
    missing = {"dz_i", "dz_j", "weight"} - set(df.columns)
    if missing or df.empty:
        raise InputError(f"Kernel CSV {file_path} needs rows with dz_i,dz_j,weight")
    di = df["dz_i"].to_numpy(dtype=np.int64)
    dj = df["dz_j"].to_numpy(dtype=np.int64)
    ri, rj = int(np.abs(di).max()), int(np.abs(dj).max())
    weights = np.zeros((2 * ri + 1, 2 * rj + 1))
    np.add.at(weights, (di + ri, dj + rj), df["weight"].to_numpy(dtype=np.float64))
    return weights


def load_ledger(run_dir: str) -> Tuple[pd.DataFrame, pd.DataFrame, Dict]:
    """
    Read the ledger, solver log and manifest of a finished run.

    Raises:
        InputError: If any of the files is missing, unreadable or empty.
    """
    io_cfg = base_config["io"]
    ledger_path = os.path.join(run_dir, io_cfg["ledger_file"])
    log_path = os.path.join(run_dir, io_cfg["solver_log_file"])
    manifest_path = os.path.join(run_dir, io_cfg["manifest_file"])
    for path in (ledger_path, manifest_path):
        if not os.path.isfile(path):
            logger.error(f"Run artifact missing: {path}")
            raise InputError(f"Run artifact missing: {path}")
    try:
        ledger = pd.read_csv(ledger_path)
        solver_log = pd.read_csv(log_path) if os.path.isfile(log_path) else pd.DataFrame()
        with open(manifest_path, "r") as file:
            manifest = json.load(file)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, json.JSONDecodeError) as e:
        logger.error(f"Corrupt run directory {run_dir}: {e}")
        raise InputError(f"Corrupt run directory {run_dir}: {e}") from e
    if ledger.empty:
        raise InputError(f"Ledger {ledger_path} has no rows")
    numeric = ledger.apply(pd.to_numeric, errors="coerce")
    if numeric.isna().any().any():
        raise InputError(f"Ledger {ledger_path} has non-numeric entries")
    return numeric, solver_log, manifest


def load_snapshots(run_dir: str, grid: Grid2D, pattern: Optional[str] = None) -> Dict[int, DensityField]:
    """All ``state_%06d.pgm`` snapshots in ``run_dir`` keyed by step index."""
    pattern = pattern or base_config["io"]["snapshot_pattern"]
    prefix, suffix = pattern.split("%", 1)[0], os.path.splitext(pattern)[1]
    states = {}
    for name in sorted(os.listdir(run_dir)):
        if not (name.startswith(prefix) and name.endswith(suffix)):
            continue
        stem = name[len(prefix): -len(suffix)]
        if not stem.isdigit():
            continue
        values = load_pgm(os.path.join(run_dir, name))
        if values.shape != grid.shape:
            raise InputError(f"Snapshot {name} does not match grid {grid.shape}")
        states[int(stem)] = DensityField(grid, values)
    return states

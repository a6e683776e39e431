import datetime
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from msflow import __version__, base_config
from msflow.config.flow_config import FlowConfig, load_flow_config, parse_flow_config
from msflow.getters.data_getter import load_init_set, load_ledger, load_snapshots
from msflow.getters.shapes import make_init
from msflow.pipeline import diagnostics
from msflow.pipeline.energy import kernel_from_spec
from msflow.pipeline.grid_measure import DensityField, Grid2D, kron_upsample, mass
from msflow.pipeline.jko import FlowLedger, run_flow
from msflow.utils.errors import InputError
from msflow.utils.helper import (
    delete_file,
    dump_plan_csv,
    sha256_file,
    write_frame_csv,
    write_json,
    write_pgm,
)

logger = logging.getLogger("<MSFLOW>")

_io = base_config["io"]


@dataclass
class RunManifest:
    """Provenance of one run directory, stored as ``manifest.json``."""

    config_text: str
    inputs: Dict[str, str]
    version: str = __version__
    started: str = ""
    finished: str = ""
    n_steps: int = 0
    fallback_steps: List[int] = field(default_factory=list)
    error: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)


@dataclass
class RunResult:
    ledger: FlowLedger
    manifest: RunManifest
    out_dir: str

    @property
    def had_fallback(self) -> bool:
        return bool(self.ledger.fallback_steps)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def write_run(ledger: FlowLedger, manifest: RunManifest, out_dir: str) -> RunManifest:
    """
    Write ledger, solver log, snapshots and dumped plans, then the manifest
    with the checksum of every file written. The manifest goes last.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, _io["ledger_file"])
    write_frame_csv(ledger.to_frame(), path)
    written.append(path)

    path = os.path.join(out_dir, _io["solver_log_file"])
    write_frame_csv(ledger.solver_frame(), path)
    written.append(path)

    for n, state in ledger.snapshots().items():
        path = os.path.join(out_dir, _io["snapshot_pattern"] % n)
        write_pgm(state.values, path)
        written.append(path)

    for n, plan in sorted(ledger.plans.items()):
        path = os.path.join(out_dir, _io["plan_pattern"] % n)
        dump_plan_csv(plan, path)
        written.append(path)

    manifest.outputs = {os.path.basename(p): sha256_file(p) for p in written}
    manifest.n_steps = ledger.n_steps
    manifest.fallback_steps = list(ledger.fallback_steps)
    manifest.error = ledger.error
    manifest.finished = _now()
    write_json(os.path.join(out_dir, _io["manifest_file"]), asdict(manifest))
    return manifest


def pipeline_run(
    config_path: Optional[str],
    init_path: str,
    out_dir: str,
    dump_steps: Sequence[int] = (),
    normalize: Optional[bool] = None,
    cfg: Optional[FlowConfig] = None,
) -> RunResult:
    """
    Orchestrates one flow run, managing each step sequentially.

    Args:
        config_path (str): Flat key=value config; ``None`` uses the defaults.
        init_path (str): Initial set as PGM or ``i,j,value`` CSV.
        out_dir (str): Output directory, created if missing.
        dump_steps (Sequence[int]): Steps whose transport plan is written as CSV.
        normalize (bool): Overrides the config's ``normalize`` flag when given.
        cfg (FlowConfig): Ready-made config; takes precedence over ``config_path``.

    Returns:
        RunResult: Ledger, manifest and output directory.

    Raises:
        InputError: If the config or the initial set is invalid.
        RuntimeError: On unexpected failures.
    """
    started = _now()
    try:
        logger.info("<< Step 1: Loading the flow configuration >>")
        cfg = cfg if cfg is not None else load_flow_config(config_path)
        if normalize is not None:
            cfg = cfg.replace(normalize=normalize)
        inputs = {}
        if config_path is not None:
            inputs[os.path.basename(config_path)] = sha256_file(config_path)

        logger.info("<< Step 2: Loading the initial set >>")
        grid = cfg.grid()
        init = load_init_set(init_path, grid)
        inputs[os.path.basename(init_path)] = sha256_file(init_path)
        logger.info(f"Initial set {init_path}: mass {mass(init)!r} on {grid.shape}")

        logger.info("<< Step 3: Building the interaction kernel >>")
        kernel = kernel_from_spec(cfg.kernel, grid)

        logger.info(f"<< Step 4: Running {cfg.n_steps} minimizing-movement steps >>")
        ledger = run_flow(init, cfg, kernel, dump_steps=dump_steps)

        logger.info("<< Step 5: Writing ledger, snapshots and manifest >>")
        manifest = RunManifest(config_text=cfg.to_text(), inputs=inputs, started=started)
        manifest = write_run(ledger, manifest, out_dir)

        if ledger.fallback_steps:
            logger.warning(f"Fallback steps: {ledger.fallback_steps}")
        logger.info(f"Run written to {out_dir}")
        return RunResult(ledger, manifest, out_dir)

    except InputError as ie:
        logger.error(f"InputError: {ie}")
        raise

    except Exception as e:
        logger.error(f"An unexpected error occurred: {e}")
        raise RuntimeError(f"Flow run failed for {init_path}") from e


def load_run_config(manifest: Dict) -> FlowConfig:
    text = manifest.get("config_text")
    if not isinstance(text, str):
        raise InputError("Manifest has no config_text")
    return parse_flow_config(text)


def pipeline_check(run_dir: str, report_path: Optional[str] = None) -> diagnostics.DiagnosticsReport:
    """
    Re-verifies a finished run from its files.

    Args:
        run_dir (str): Directory written by ``pipeline_run``.
        report_path (str): Report CSV; defaults to ``report.csv`` in ``run_dir``.

    Returns:
        DiagnosticsReport: Every check of ``diagnostics.check_run``.

    Raises:
        InputError: If the run directory is missing, corrupt or empty.
    """
    try:
        logger.info("<< Step 1: Loading ledger and manifest >>")
        if not os.path.isdir(run_dir):
            raise InputError(f"Run directory not found: {run_dir}")
        frame, _, manifest = load_ledger(run_dir)
        cfg = load_run_config(manifest)
        for name, digest in manifest.get("outputs", {}).items():
            path = os.path.join(run_dir, name)
            if os.path.isfile(path) and sha256_file(path) != digest:
                logger.warning(f"Checksum mismatch for {name}")

        logger.info("<< Step 2: Loading snapshots >>")
        states = load_snapshots(run_dir, cfg.grid())
        if not states:
            raise InputError(f"No snapshots found in {run_dir}")

        logger.info("<< Step 3: Running the diagnostics >>")
        report = diagnostics.check_run(frame, states, cfg)

        logger.info("<< Step 4: Writing the report >>")
        report_path = report_path or os.path.join(run_dir, _io["report_file"])
        write_frame_csv(report.to_frame(), report_path)
        if report.passed:
            logger.info(f"All {len(report.entries)} checks passed")
        else:
            logger.warning(f"Failed checks: {report.failed_checks()}")
        return report

    except InputError as ie:
        logger.error(f"InputError: {ie}")
        raise

    except Exception as e:
        logger.error(f"An unexpected error occurred: {e}")
        raise RuntimeError(f"Check failed for {run_dir}") from e


def _run_level(
    level: FlowConfig, start: DensityField, factor: int, divisor: int, out_dir: str
) -> Dict:
    """Run one refinement level into its own subdirectory and summarize it."""
    ledger = run_flow(start, level, kernel_from_spec(level.kernel, level.grid()))
    sub_dir = os.path.join(out_dir, f"level_x{factor}_h{divisor}")
    write_run(ledger, RunManifest(config_text=level.to_text(), inputs={}, started=_now()), sub_dir)
    frame = ledger.to_frame()
    energy = frame["total_energy"].to_numpy()
    steps = frame.iloc[1:]
    return {
        "factor": factor,
        "h_divisor": divisor,
        "cell_size": level.cell_size,
        "h": level.h,
        "n_steps": ledger.n_steps,
        "energy_0": float(energy[0]),
        "energy_final": float(energy[-1]),
        "energy_drift": float(energy[0] - energy[-1]),
        "max_w2_step": float(steps["w2_step"].max()) if len(steps) else 0.0,
        "max_el_residual": float(steps["el_residual"].max()) if len(steps) else 0.0,
        "max_cont_residual": float(steps["cont_residual"].max()) if len(steps) else 0.0,
        "fallback_steps": len(ledger.fallback_steps),
    }


def pipeline_refine(
    config_path: Optional[str],
    init_path: Optional[str],
    out_dir: str,
    factors: Sequence[int] = (1, 2, 4),
    divisors: Sequence[int] = (1, 2, 4),
    shape: Optional[str] = None,
) -> pd.DataFrame:
    """
    Refinement study: reruns at ``factors`` times the grid resolution (same
    ``h``) and at ``h / divisors`` (same grid, same final time), each level
    into its own subdirectory, then writes ``refinement.csv``.

    Either ``init_path`` or ``shape`` names the initial set. A file is
    upsampled cell by cell; a shape is rebuilt on every grid.

    Returns:
        pd.DataFrame: One row per level.

    Raises:
        InputError: If neither an initial set nor a shape is given.
        RuntimeError: On unexpected failures.
    """
    try:
        logger.info("<< Step 1: Loading the base configuration >>")
        cfg = load_flow_config(config_path)
        grid = cfg.grid()

        logger.info("<< Step 2: Building the base initial set >>")
        if init_path is None and shape is None:
            raise InputError("Refinement needs an initial set file or a shape")
        init = load_init_set(init_path, grid) if init_path is not None else make_init(shape, grid)

        levels = [(f, 1) for f in factors] + [(1, d) for d in divisors if d != 1]
        logger.info(f"<< Step 3: Running {len(levels)} refinement levels >>")
        os.makedirs(out_dir, exist_ok=True)

        def one(level) -> Dict:
            factor, divisor = level
            level_cfg = cfg.refined(factor).replace(h=cfg.h / divisor, n_steps=cfg.n_steps * divisor)
            if factor == 1:
                start = init
            elif shape is not None:
                start = make_init(shape, level_cfg.grid())
            else:
                start = kron_upsample(init, factor)
            return _run_level(level_cfg, start, factor, divisor, out_dir)

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                rows = list(pool.map(one, levels))
        else:
            rows = [one(level) for level in levels]

        logger.info("<< Step 4: Writing the refinement table >>")
        table = pd.DataFrame(rows)
        write_frame_csv(table, os.path.join(out_dir, _io["refinement_file"]))
        return table

    except InputError as ie:
        logger.error(f"InputError: {ie}")
        raise

    except Exception as e:
        logger.error(f"An unexpected error occurred: {e}")
        raise RuntimeError(f"Refinement study failed in {out_dir}") from e


def refinement_order(table: pd.DataFrame, column: str = "max_el_residual") -> float:
    """Log-log slope of ``column`` against cell size over the grid levels."""
    grid_levels = table[table["h_divisor"] == 1]
    values = grid_levels[column].to_numpy(dtype=np.float64)
    sizes = grid_levels["cell_size"].to_numpy(dtype=np.float64)
    keep = values > 0
    if np.count_nonzero(keep) < 2:
        return float("nan")
    return float(np.polyfit(np.log(sizes[keep]), np.log(values[keep]), 1)[0])


def pipeline_calibrate(
    out_path: Optional[str] = None,
    resolutions: Sequence[int] = (64, 128, 256),
    holder_run: Optional[str] = None,
) -> Dict:
    """
    Recomputes the frozen constants.

    Args:
        out_path (str): Target yaml; defaults to the packaged frozen_fits.yaml.
        resolutions (Sequence[int]): Disk resolutions for the el_tol curve.
        holder_run (str): Run directory of a reference flow; its max L1
            Hölder ratio refits ``C'``.

    Returns:
        Dict: The new constants.
    """
    try:
        logger.info("<< Step 1: Euler-Lagrange residuals on stationary disks >>")
        el_points = []
        for n in resolutions:
            grid = Grid2D.centered(n, n, 3.2 / n)
            residual = diagnostics.disk_el_residual(n)
            logger.info(f"disk {n}x{n}: residual {residual:.4e}")
            el_points.append((grid.cell_size, residual))

        holder_ratio = None
        if holder_run is not None:
            logger.info("<< Step 2: Hölder ratio of the reference run >>")
            frame, _, manifest = load_ledger(holder_run)
            cfg = load_run_config(manifest)
            states = load_snapshots(holder_run, cfg.grid())
            report = diagnostics.check_holder_curves(
                states, cfg.h, float(frame["total_energy"].iloc[0]), cfg.accept_slack, fits=None
            )
            holder_ratio = report.max_value("holder_l1_bound")

        logger.info("<< Step 3: Interpolation corpus and frozen_fits.yaml >>")
        return diagnostics.calibrate_frozen_fits(
            out_path, el_points=el_points, holder_ratio=holder_ratio
        )

    except InputError as ie:
        logger.error(f"InputError: {ie}")
        raise

    except Exception as e:
        logger.error(f"An unexpected error occurred: {e}")
        raise RuntimeError("Calibration failed") from e


def make_init_file(shape: str, grid: Grid2D, out_path: str, target_mass: Optional[float] = 1.0) -> DensityField:
    """Write a reference initial set as PGM and return it."""
    init = make_init(shape, grid, target_mass)
    delete_file(out_path)
    write_pgm(init.values, out_path)
    logger.info(f"Wrote {shape} ({mass(init)!r} mass, {grid.shape}) to {out_path}")
    return init

"""FlowConfig: every numerical parameter of a run, from base.yaml plus a flat key=value file."""

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

from msflow import base_config
from msflow.pipeline.grid_measure import Grid2D
from msflow.pipeline.transport import TransportSettings
from msflow.utils.errors import InputError

logger = logging.getLogger("<MSFLOW>")

_flow = base_config["flow"]
_grid = base_config["grid"]
_transport = base_config["transport"]
_solver = base_config["solver"]
_energy = base_config["energy"]
_diag = base_config["diagnostics"]

# key in the config file -> FlowConfig attribute
KEY_MAP: Dict[str, str] = {
    "h": "h",
    "n_steps": "n_steps",
    "grid.nx": "nx",
    "grid.ny": "ny",
    "grid.cell_size": "cell_size",
    "grid.origin_x": "origin_x",
    "grid.origin_y": "origin_y",
    "kernel": "kernel",
    "eps.start": "eps_start",
    "eps.end": "eps_end",
    "eps.decay": "eps_decay",
    "outer_iters": "outer_iters",
    "outer_tol": "outer_tol",
    "inner_iters": "inner_iters",
    "inner_tol": "inner_tol",
    "prox_step": "prox_step",
    "band_cells": "band_cells",
    "mass_tol": "mass_tol",
    "marginal_tol": "marginal_tol",
    "duality_tol": "duality_tol",
    "sinkhorn_max_iters": "sinkhorn_max_iters",
    "exact_ot_cell_cap": "exact_ot_cell_cap",
    "exact_assignment_cell_cap": "exact_assignment_cell_cap",
    "eps.relaxed_end": "relaxed_eps_end",
    "relaxed_marginal_tol": "relaxed_marginal_tol",
    "relaxed_sinkhorn_iters": "relaxed_sinkhorn_iters",
    "accept_slack": "accept_slack",
    "snapshot_every": "snapshot_every",
    "de_giorgi_samples": "de_giorgi_samples",
    "seed": "seed",
    "normalize": "normalize",
    "workers": "workers",
    "mollifier_cells": "mollifier_cells",
    "el_test_fields": "el_test_fields",
    "cont_test_fields": "cont_test_fields",
}

_POSITIVE = (
    "h", "cell_size", "eps_start", "eps_end", "outer_tol", "inner_tol", "prox_step",
    "mass_tol", "marginal_tol", "duality_tol", "accept_slack", "relaxed_eps_end",
    "relaxed_marginal_tol",
)
_AT_LEAST_ONE = (
    "nx", "ny", "outer_iters", "inner_iters", "sinkhorn_max_iters", "exact_ot_cell_cap",
    "exact_assignment_cell_cap", "relaxed_sinkhorn_iters",
    "snapshot_every", "de_giorgi_samples", "workers", "mollifier_cells",
)


def _optional_float(value) -> Optional[float]:
    return None if value is None else float(value)


@dataclass(frozen=True)
class FlowConfig:
    h: float = float(_flow["h"])
    n_steps: int = int(_flow["n_steps"])
    nx: int = int(_grid["nx"])
    ny: int = int(_grid["ny"])
    cell_size: float = float(_grid["cell_size"])
    origin_x: Optional[float] = _optional_float(_grid["origin_x"])
    origin_y: Optional[float] = _optional_float(_grid["origin_y"])
    kernel: str = str(base_config["kernel"])
    eps_start: float = float(_transport["eps_start"])
    eps_end: float = float(_transport["eps_end"])
    eps_decay: float = float(_transport["eps_decay"])
    outer_iters: int = int(_solver["outer_iters"])
    outer_tol: float = float(_solver["outer_tol"])
    inner_iters: int = int(_solver["inner_iters"])
    inner_tol: float = float(_solver["inner_tol"])
    prox_step: float = float(_solver["prox_step"])
    band_cells: int = int(_solver["band_cells"])
    mass_tol: float = float(_transport["mass_tol"])
    marginal_tol: float = float(_transport["marginal_tol"])
    duality_tol: float = float(_transport["duality_tol"])
    sinkhorn_max_iters: int = int(_transport["sinkhorn_max_iters"])
    exact_ot_cell_cap: int = int(_transport["exact_ot_cell_cap"])
    exact_assignment_cell_cap: int = int(_transport["exact_assignment_cell_cap"])
    relaxed_eps_end: float = float(_transport["relaxed_eps_end"])
    relaxed_marginal_tol: float = float(_transport["relaxed_marginal_tol"])
    relaxed_sinkhorn_iters: int = int(_transport["relaxed_sinkhorn_iters"])
    accept_slack: float = float(_solver["accept_slack"])
    snapshot_every: int = int(_flow["snapshot_every"])
    de_giorgi_samples: int = int(_flow["de_giorgi_samples"])
    seed: int = int(_flow["seed"])
    normalize: bool = bool(_flow["normalize"])
    workers: int = int(_flow["workers"])
    mollifier_cells: int = int(_energy["mollifier_cells"])
    el_test_fields: int = int(_diag["el_test_fields"])
    cont_test_fields: int = int(_diag["cont_test_fields"])

    def __post_init__(self):
        for name in _POSITIVE:
            if not getattr(self, name) > 0:
                raise InputError(f"Config value '{name}' must be > 0, got {getattr(self, name)}")
        for name in _AT_LEAST_ONE:
            if getattr(self, name) < 1:
                raise InputError(f"Config value '{name}' must be >= 1, got {getattr(self, name)}")
        if self.n_steps < 0:
            raise InputError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.band_cells < 0:
            raise InputError(f"band_cells must be >= 0, got {self.band_cells}")
        if not 0 < self.eps_decay < 1:
            raise InputError(f"eps.decay must lie in (0, 1), got {self.eps_decay}")
        if self.eps_end > self.eps_start:
            raise InputError("eps.end must not exceed eps.start")
        if self.relaxed_eps_end > self.eps_start:
            raise InputError("eps.relaxed_end must not exceed eps.start")
        if (self.origin_x is None) != (self.origin_y is None):
            raise InputError("grid.origin_x and grid.origin_y must be given together")

    def grid(self) -> Grid2D:
        """Configured grid; centred on the coordinate origin unless an origin is set."""
        if self.origin_x is None:
            return Grid2D.centered(self.nx, self.ny, self.cell_size)
        return Grid2D(self.nx, self.ny, self.cell_size, (self.origin_x, self.origin_y))

    def transport_settings(self) -> TransportSettings:
        return TransportSettings(
            eps_start=self.eps_start,
            eps_end=self.eps_end,
            eps_decay=self.eps_decay,
            max_iters=self.sinkhorn_max_iters,
            marginal_tol=self.marginal_tol,
            duality_tol=self.duality_tol,
            mass_tol=self.mass_tol,
            cell_cap=self.exact_ot_cell_cap,
            assignment_cell_cap=self.exact_assignment_cell_cap,
        )

    def relaxed_transport_settings(self) -> TransportSettings:
        """Entropic settings for the linearization inside a step: coarser floor, looser marginals."""
        return dataclasses.replace(
            self.transport_settings(),
            eps_end=self.relaxed_eps_end,
            marginal_tol=self.relaxed_marginal_tol,
            max_iters=self.relaxed_sinkhorn_iters,
        )

    def sample_times(self, h: Optional[float] = None) -> List[float]:
        """Interpolation times ``h / 2**k`` ascending, ending at ``h``."""
        h = self.h if h is None else h
        return [h / 2**k for k in range(self.de_giorgi_samples - 1, -1, -1)]

    def slope_columns(self) -> List[str]:
        """Ledger column names matching ``sample_times``: slope_h8, slope_h4, slope_h2, slope_h."""
        return [
            "slope_h" if k == 0 else f"slope_h{2**k}"
            for k in range(self.de_giorgi_samples - 1, -1, -1)
        ]

    def replace(self, **changes) -> "FlowConfig":
        return dataclasses.replace(self, **changes)

    def refined(self, factor: int) -> "FlowConfig":
        """Same physical domain with ``factor`` times more cells per axis."""
        grid = self.grid().refined(factor)
        changes = dict(nx=grid.nx, ny=grid.ny, cell_size=grid.cell_size)
        if self.origin_x is not None:
            changes.update(origin_x=grid.origin[0], origin_y=grid.origin[1])
        return self.replace(**changes)

    def to_text(self) -> str:
        """Canonical ``key = value`` rendering; ``parse_flow_config`` reads it back."""
        lines = []
        for key, attr in KEY_MAP.items():
            value = getattr(self, attr)
            if value is None:
                continue
            if isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(FlowConfig)}


def _coerce(key: str, attr: str, raw: str):
    kind = _FIELD_TYPES[attr]
    text = raw.strip()
    try:
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind in (int, "int"):
            as_float = float(text)
            if as_float != int(as_float):
                raise ValueError(text)
            return int(as_float)
        if kind in (float, "float"):
            return float(text)
        if kind in (Optional[float], "Optional[float]"):
            return None if text.lower() in ("none", "null", "") else float(text)
        return text
    except ValueError:
        raise InputError(f"Config key '{key}' has an invalid value {raw!r}")


def parse_flow_config(text: str, base: Optional[FlowConfig] = None) -> FlowConfig:
    """
    Parse flat ``key = value`` text on top of ``base`` (defaults from base.yaml).
    ``#`` starts a comment; blank lines are skipped.

    Raises:
        InputError: On unknown keys, duplicate keys, malformed lines or values.
    """
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"Config line {lineno} is not 'key = value': {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in KEY_MAP:
            logger.error(f"Unknown config key '{key}' on line {lineno}")
            raise InputError(f"Unknown config key '{key}' on line {lineno}")
        attr = KEY_MAP[key]
        if attr in changes:
            raise InputError(f"Config key '{key}' given twice")
        changes[attr] = _coerce(key, attr, raw)
    return dataclasses.replace(base or FlowConfig(), **changes)


def load_flow_config(file_path: Optional[str]) -> FlowConfig:
    """Read a config file; ``None`` gives the defaults."""
    if file_path is None:
        return FlowConfig()
    if not os.path.isfile(file_path):
        logger.error(f"Config file not found: {file_path}")
        raise InputError(f"Config file not found: {file_path}")
    with open(file_path, "r") as file:
        return parse_flow_config(file.read())

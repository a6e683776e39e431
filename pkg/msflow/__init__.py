"""msflow: Wasserstein minimizing movements for the Mullins-Sekerka flow."""

from pathlib import Path
from typing import Optional

import yaml

__version__ = "0.1.0"

_PACKAGE_DIR = Path(__file__).parent.resolve()


def get_yaml_config(file_path: Path) -> Optional[dict]:
    """Fetch yaml config and return as dict if it exists."""
    if file_path.exists():
        with open(file_path, "rt") as f:
            return yaml.safe_load(f)


# default location of the info/warning/error logs when no run directory is given
log_output_path = str(_PACKAGE_DIR / "logs")
log_config_path = _PACKAGE_DIR / "config" / "logging.yaml"

# solver and check defaults; FlowConfig fields fall back to these
base_config = get_yaml_config(_PACKAGE_DIR / "config" / "base.yaml")

# frozen calibration constants, regenerated by `msflow calibrate`
frozen_fits_path = _PACKAGE_DIR / "config" / "frozen_fits.yaml"
frozen_fits = get_yaml_config(frozen_fits_path)

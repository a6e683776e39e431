import logging
import logging.config
import os
from typing import Optional

import yaml

from msflow import log_config_path, log_output_path

LOGGER_NAME = "<MSFLOW>"


def setup_logger(out_dir: Optional[str] = None, verbose: bool = False) -> logging.Logger:
    """
    Set up the msflow logger with file handlers inside the run directory.

    Args:
        out_dir (str): Directory receiving the info, warning and error logs.
            Defaults to the package log folder.
        verbose (bool): If True, the console handler also prints DEBUG records.

    Returns:
        logging.Logger: The configured "<MSFLOW>" logger.
    """
    out_dir = out_dir or log_output_path
    os.makedirs(out_dir, exist_ok=True)

    with open(log_config_path, "r") as file:
        logging_cfg = yaml.safe_load(file)

    info_out_path = os.path.join(out_dir, "msflow.info.log")
    warning_out_path = os.path.join(out_dir, "msflow.warning.log")
    error_out_path = os.path.join(out_dir, "msflow.error.log")

    # Update handler paths in config
    logging_cfg["handlers"]["info_file_handler"]["filename"] = info_out_path
    logging_cfg["handlers"]["error_file_handler"]["filename"] = error_out_path
    logging_cfg["handlers"]["warning_file_handler"]["filename"] = warning_out_path
    if verbose:
        logging_cfg["handlers"]["console"]["level"] = "DEBUG"

    logging.config.dictConfig(logging_cfg)
    return logging.getLogger(LOGGER_NAME)


def close_logger() -> None:
    """Detach and close the file handlers so run directories can be moved."""
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        if isinstance(handler, logging.FileHandler):
            handler.close()
            logger.removeHandler(handler)

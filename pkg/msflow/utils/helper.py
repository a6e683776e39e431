import hashlib
import json
import logging
import os
import tempfile
from typing import Dict, List

import numpy as np
import pandas as pd

logger = logging.getLogger("<MSFLOW>")

# round-trip exact float formatting for every CSV artifact
FLOAT_FORMAT = "%.17g"


def sha256_file(file_path: str) -> str:
    """Hex SHA-256 digest of a file, read in 1 MiB chunks."""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_text(file_path: str, text: str) -> None:
    """
    Write ``text`` to a temporary file in the target directory, then rename it
    over ``file_path`` so readers never see a partial file.
    """
    directory = os.path.dirname(os.path.abspath(file_path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, file_path)
    except Exception as e:
        logger.error(f"Could not write {file_path}: {e}")
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(file_path: str, payload: Dict) -> None:
    atomic_write_text(file_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_frame_csv(df: pd.DataFrame, file_path: str) -> None:
    """CSV with ``FLOAT_FORMAT`` floats and ``\\n`` line endings, written atomically."""
    atomic_write_text(
        file_path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    )


def write_pgm(values: np.ndarray, file_path: str) -> None:
    """
    Write an ``[i, j]``-indexed field in [0, 1] as an ASCII (P2) bitmap with
    maxval 255; the inverse of ``getters.data_getter.load_pgm`` for binary fields.
    """
    image = np.rint(np.asarray(values)[:, ::-1].T * 255).astype(np.int64)
    height, width = image.shape
    lines: List[str] = ["P2", f"{width} {height}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in image)
    atomic_write_text(file_path, "\n".join(lines) + "\n")


def dump_plan_csv(plan, file_path: str) -> None:
    """Nonzero coupling of a transport plan as ``src_i,src_j,dst_i,dst_j,mass``."""
    write_frame_csv(plan.to_frame(), file_path)
    logger.info(f"Transport plan written to {file_path}")


def delete_file(file_path: str) -> None:
    """
    Delete a stale output file if it exists.

    Raises:
        ValueError: If the path exists but is not a file.
    """
    if not os.path.exists(file_path):
        return
    if not os.path.isfile(file_path):
        logger.error(f"The provided path is not a file: {file_path}")
        raise ValueError(f"The provided path is not a file: {file_path}")
    os.remove(file_path)
    logger.debug(f"File deleted: {file_path}")

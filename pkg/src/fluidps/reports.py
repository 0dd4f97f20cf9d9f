import json
import os

import pandas as pd

from .config import settings, get_logger
from .utils import round_sig

logger = get_logger(__name__)


def to_json(payload: dict) -> str:
    """Stable JSON: sorted keys, floats at the configured significant digits."""
    return json.dumps(round_sig(payload), indent=2, sort_keys=True)


def write_reports(tables: dict, output_dir: str | None = None) -> dict[str, str]:
    """
    Writes each table of an experiment to ``output_dir``.

    - DataFrames go to ``<name>.csv`` (header row, no index, 12 significant digits).
    - Dicts go to ``<name>.json``.
    - Files left by a previous run under the same names are removed first.
    Returns the mapping name -> written path.
    """
    output_dir = output_dir or settings.OUTPUT_DIR
    os.makedirs(output_dir, exist_ok=True)
    float_format = f"%.{settings.SIG_DIGITS}g"

    paths = {}
    for name, table in tables.items():
        extension = "csv" if isinstance(table, pd.DataFrame) else "json"
        paths[name] = os.path.join(output_dir, f"{name}.{extension}")

    # --- Clear stale files ---
    for path in paths.values():
        if os.path.exists(path):
            os.remove(path)
            logger.debug(f"Removed existing file: {path}")

    for name, table in tables.items():
        path = paths[name]
        if isinstance(table, pd.DataFrame):
            table.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
            logger.info(f"Wrote {len(table)} rows to {path}")
        else:
            with open(path, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(to_json(table) + "\n")
            logger.info(f"Wrote report {path}")
    return paths

from __future__ import annotations

import math
import re
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .config import settings, get_logger
from .exceptions import InvalidSpecError

logger = get_logger(__name__)

# Families whose body is a file path rather than key=value pairs
RAW_BODY_FAMILIES = ("csv", "grid")


def parse_spec(text: str) -> tuple[str, dict[str, list[float]] | str]:
    """
    Splits a spec string such as ``hyperexp:w=0.5,0.5;r=0.5,2`` into its
    family name and parameters.

    - The family is the part before the first ``:`` (lower-cased).
    - The body is split on ``,`` and ``;``. A token containing ``=`` starts a
      new key, a bare token appends another value to the last key.
    - For ``csv`` and ``grid`` the body is returned untouched as a path.
    Example: "uniform:a=0,b=2" -> ("uniform", {"a": [0.0], "b": [2.0]})
    """
    if not text or not str(text).strip():
        raise InvalidSpecError("Empty spec string.")
    family, _, body = str(text).strip().partition(":")
    family = family.strip().lower()
    if not re.fullmatch(r"[a-z][a-z0-9_-]*", family):
        raise InvalidSpecError(f"Malformed family name in spec '{text}'.")
    if family in RAW_BODY_FAMILIES:
        if not body.strip():
            raise InvalidSpecError(f"Spec '{text}' needs a file path.")
        return family, body.strip()

    params: dict[str, list[float]] = {}
    key = None
    for token in re.split(r"[;,]", body):
        token = token.strip()
        if not token:
            continue
        if "=" in token:
            key, _, value = token.partition("=")
            key = key.strip().lower()
            if not key or key in params:
                raise InvalidSpecError(f"Bad or repeated key '{key}' in spec '{text}'.")
            params[key] = []
        elif key is None:
            raise InvalidSpecError(f"Value '{token}' has no key in spec '{text}'.")
        else:
            value = token
        try:
            params[key].append(float(value))
        except ValueError:
            raise InvalidSpecError(
                f"Value '{value}' for key '{key}' in spec '{text}' is not a number."
            ) from None
    return family, params


def scalar(params: dict[str, list[float]], key: str, default: float | None = None) -> float:
    """Returns the single value stored under ``key``."""
    if key not in params:
        if default is None:
            raise InvalidSpecError(f"Missing parameter '{key}'.")
        return default
    values = params[key]
    if len(values) != 1:
        raise InvalidSpecError(f"Parameter '{key}' takes one value, got {len(values)}.")
    return values[0]


def check_keys(family: str, params: dict[str, list[float]], allowed: Iterable[str]):
    unknown = set(params) - set(allowed)
    if unknown:
        raise InvalidSpecError(
            f"Unknown parameter(s) {sorted(unknown)} for family '{family}'."
        )


def parse_range(text: str | float | Sequence[float]) -> np.ndarray:
    """
    Parses a time/radius list.

    ``a:step:b`` is the inclusive arithmetic range, anything else is a
    comma separated list. Numeric input passes through.
    Example: "0:0.5:2" -> [0, 0.5, 1, 1.5, 2]
    """
    if isinstance(text, (int, float)):
        return np.array([float(text)])
    if not isinstance(text, str):
        return np.asarray(text, dtype=float)
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise InvalidSpecError(f"Range '{text}' must read start:step:stop.")
            start, step, stop = parts
            if step <= 0 or stop < start:
                raise InvalidSpecError(f"Range '{text}' is empty or has a non-positive step.")
            count = int(math.floor((stop - start) / step + 1e-9))
            return np.round(start + step * np.arange(count + 1), 12)
        return np.array([float(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise InvalidSpecError(f"Cannot parse '{text}' as a list of numbers.") from None


def parallel_map(fn: Callable[[Any], Any], items: Sequence[Any], threads: int | None = None) -> list:
    """
    Applies ``fn`` to every item, in worker processes when allowed.
    Results come back in input order whatever the worker count.
    """
    items = list(items)
    workers = min(threads or settings.THREADS, len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    logger.info(f"Dispatching {len(items)} tasks to {workers} worker processes.")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def round_sig(value: Any, digits: int | None = None) -> Any:
    """Rounds floats (recursively in dicts and lists) to significant digits."""
    digits = digits or settings.SIG_DIGITS
    if isinstance(value, dict):
        return {k: round_sig(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_sig(v, digits) for v in value]
    if isinstance(value, np.ndarray):
        return [round_sig(v, digits) for v in value.tolist()]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return str(value)
        return float(f"{value:.{digits}g}")
    return value

#!/usr/bin/env python3
"""
Stdown Core Library
Shared plumbing for the spatio-temporal soil-moisture downscaling toolkit

Holds the exception hierarchy, physical and format constants, logging setup,
JSON/config helpers, thread-count resolution and the graymap writer used by
every core module and CLI tool.

License: MIT
Version: 1.0.0
"""

import os
import argparse
import sys
import json
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np


# ============================================================================
# EXCEPTIONS
# ============================================================================

class StdownError(Exception):
    """Base exception for all stdown errors."""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_json(self) -> Dict[str, Any]:
        """Convert exception to JSON-serializable dict."""
        return {
            "error": self.__class__.__name__,
            "message": self.message,
            "details": self.details
        }


class ShapeMismatchError(StdownError):
    """Raised when arrays or grids that must align do not."""
    pass


class SchemaMismatchError(StdownError):
    """Raised when a cube schema does not match stats, config or another cube."""
    pass


class MaskedChannelError(StdownError):
    """Raised when a channel has too few valid cells to be used."""
    pass


class InsufficientDataError(StdownError):
    """Raised when an operation needs more samples, patches or timestamps."""
    pass


class ConfigError(StdownError):
    """Raised when a configuration value or section is invalid."""
    pass


class NonFiniteError(StdownError):
    """Raised when NaN or Inf appears where finite values are required."""
    pass


class DivergenceError(StdownError):
    """Raised when validation loss becomes non-finite during training."""
    pass


class FormatError(StdownError):
    """Raised when an on-disk artifact does not follow its declared layout."""
    pass


# ============================================================================
# CONSTANTS
# ============================================================================

TOOL_NAME = "stdown"

# Time axis
STEP_SECONDS = 10800                 # 3-hour cadence of every cube
HOURS_PER_YEAR_NORM = 8784.0         # leap-year-safe HOY divisor
TRAINING_HOURS = (6, 18)             # nominal SMAP overpass hours (UTC)
NON_TRAINING_HOURS = (0, 3, 9, 12, 15, 21)
DAILY_HOURS = (0, 3, 6, 9, 12, 15, 18, 21)

# Quality-control thresholds
FREEZE_KELVIN = 273.15
MAX_WATER_FRACTION = 0.10
MIN_VALID_SM = 0.02
SM_RANGE = (0.0, 1.0)

# Numerical floors
STD_EPS = 1e-8
SQRT_EPS = 1e-12

# STC format
STC_MANIFEST = "manifest.json"
STC_DATA = "data.bin"
STC_MASK = "mask.bin"
STC_ORDER = "T,H,W,C row-major"
STC_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}

# Environment
THREADS_ENV = "STDOWN_THREADS"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger(__name__)


# ============================================================================
# LOGGING
# ============================================================================

def configure_logging(level: str = "WARNING") -> None:
    """Install a single stderr handler at the requested level."""
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level: {level}")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(numeric)


# ============================================================================
# CONFIG & JSON HELPERS
# ============================================================================

def resolve_threads(flag: Optional[int] = None) -> int:
    """Thread count: flag, then STDOWN_THREADS, then available cores."""
    if flag is not None:
        value = flag
    elif os.environ.get(THREADS_ENV):
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(
                f"{THREADS_ENV} must be an integer",
                {"value": os.environ[THREADS_ENV]}
            )
    else:
        value = os.cpu_count() or 1
    if value < 1:
        raise ConfigError(f"Thread count must be >= 1, got {value}")
    return value


def read_json(path: Path) -> Dict[str, Any]:
    """Read a JSON object from disk."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise FormatError(f"Expected a JSON object in {path}")
    return data


def write_json(path: Path, data: Any) -> None:
    """Write JSON with stable key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default),
                    encoding="utf-8")


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def canonical_hash(data: Any) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON form."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def check_unknown_keys(section: str, data: Dict[str, Any], allowed: Sequence[str]) -> None:
    """Reject config keys that no dataclass field consumes."""
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(
            f"Unknown keys in '{section}' config: {unknown}",
            {"section": section, "unknown": unknown, "allowed": sorted(allowed)}
        )


def finite_or_none(value: Optional[float]) -> Optional[float]:
    """Map NaN/Inf to None for JSON reports."""
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


# ============================================================================
# RUN MANIFEST
# ============================================================================

def write_run_manifest(
    output_dir: Path,
    subcommand: str,
    fields: Dict[str, Any],
    seed: Optional[int] = None,
    log_level: str = "WARNING"
) -> Path:
    """Record how an output directory was produced."""
    manifest = {
        "tool": TOOL_NAME,
        "version": __version__,
        "subcommand": subcommand,
        "seed": seed,
        "log_level": log_level,
        "inputs": {k: (str(v) if isinstance(v, Path) else v) for k, v in fields.items()},
    }
    path = Path(output_dir) / "run_manifest.json"
    # a second tool writing into the same directory keeps the first record
    if path.exists() and read_json(path).get("subcommand") != subcommand:
        path = path.with_name(f"run_manifest_{subcommand}.json")
    write_json(path, manifest)
    return path


# ============================================================================
# TOOL PLUMBING
# ============================================================================

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def add_common_arguments(parser: argparse.ArgumentParser, threads: bool = False) -> None:
    """--json and --log-level for every tool; --threads where work is parallel."""
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        default="WARNING",
        help="Logging level on stderr (default: WARNING)"
    )
    if threads:
        parser.add_argument(
            "--threads",
            type=int,
            default=None,
            help=f"Worker threads (default: ${THREADS_ENV} or all cores)"
        )
    parser.add_argument(
        "--json",
        action="store_true",
        help="Output JSON response"
    )


def error_payload(exc: BaseException) -> Dict[str, Any]:
    details = exc.details if isinstance(exc, StdownError) else {}
    return {
        "status": "error",
        "error": str(exc),
        "error_type": type(exc).__name__,
        "details": details,
    }


def emit_error(exc: BaseException, as_json: bool) -> int:
    """Report a failed run; the JSON error always goes to stderr."""
    payload = json.dumps(error_payload(exc), indent=2, default=_json_default)
    print(payload, file=sys.stderr)
    if as_json:
        print(payload)
    return 1


def emit_result(result: Dict[str, Any], as_json: bool, lines: Sequence[str]) -> int:
    if as_json:
        print(json.dumps(result, indent=2, default=_json_default))
    else:
        for line in lines:
            print(line)
    return 0


# ============================================================================
# GRAYMAP EXPORT
# ============================================================================

def write_pgm(
    path: Path,
    values: np.ndarray,
    mask: Optional[np.ndarray] = None,
    vmin: Optional[float] = None,
    vmax: Optional[float] = None
) -> Path:
    """
    Write a 2-D field as an 8-bit binary portable graymap (P5).

    Masked cells are written as 0; valid cells are scaled to 1..255 so
    they stay distinguishable from gaps. Row 0 is the first grid row.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeMismatchError("Graymap export needs a 2-D field",
                                 {"shape": list(values.shape)})
    valid = np.isfinite(values) if mask is None else (np.asarray(mask, bool) & np.isfinite(values))
    pixels = np.zeros(values.shape, dtype=np.uint8)
    if valid.any():
        lo = float(values[valid].min()) if vmin is None else vmin
        hi = float(values[valid].max()) if vmax is None else vmax
        span = hi - lo if hi > lo else 1.0
        scaled = np.clip((values - lo) / span, 0.0, 1.0)
        pixels[valid] = (1 + np.round(scaled[valid] * 254)).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + pixels.tobytes())
    return path


# ============================================================================
# MODULE METADATA
# ============================================================================

__version__ = "1.0.0"
__all__ = [
    # Exceptions
    "StdownError",
    "ShapeMismatchError",
    "SchemaMismatchError",
    "MaskedChannelError",
    "InsufficientDataError",
    "ConfigError",
    "NonFiniteError",
    "DivergenceError",
    "FormatError",

    # Helpers
    "configure_logging",
    "resolve_threads",
    "read_json",
    "write_json",
    "canonical_hash",
    "check_unknown_keys",
    "finite_or_none",
    "write_run_manifest",
    "write_pgm",
    "add_common_arguments",
    "error_payload",
    "emit_error",
    "emit_result",

    # Constants
    "STEP_SECONDS",
    "HOURS_PER_YEAR_NORM",
    "TRAINING_HOURS",
    "NON_TRAINING_HOURS",
    "DAILY_HOURS",
]

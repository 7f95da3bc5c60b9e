import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from errors import ConfigError
from schemas import ExperimentConfig

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "./out")

SPEED_OF_LIGHT = 2.99792458e8

logger = logging.getLogger(__name__)


# ── Logging ───────────────────────────────────────────────────────────────────
def setup_logging(level: Optional[str] = None) -> None:
    root = logging.getLogger()
    root.setLevel((level or LOG_LEVEL).upper())
    if not any(getattr(h, "_link_adapt", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(name)s - %(message)s"))
        handler._link_adapt = True
        root.addHandler(handler)


# ── Units ─────────────────────────────────────────────────────────────────────
def db_to_linear(value_db: float) -> float:
    return 10.0 ** (value_db / 10.0)


def linear_to_db(value: float) -> float:
    if value <= 0:
        return -math.inf
    return 10.0 * math.log10(value)


def dbm_to_watts(value_dbm: float) -> float:
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


def watts_to_dbm(value_w: float) -> float:
    if value_w <= 0:
        return -math.inf
    return 10.0 * math.log10(value_w) + 30.0


# ── Experiment config ─────────────────────────────────────────────────────────
def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Read and validate a JSON experiment file; no path means the reference scenario defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", path=str(path)) from exc
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(
            f"invalid config {path}",
            path=str(path),
            issues=[{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()],
        ) from exc


# seed, output paths and run-only sections do not change what gets built
RUNTIME_FIELDS = {"seed", "output_dir", "simulation", "sweep"}


def canonical_json(config: ExperimentConfig) -> str:
    data = config.model_dump(mode="json", exclude=RUNTIME_FIELDS)
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()

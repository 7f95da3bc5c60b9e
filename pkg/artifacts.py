"""JSON artifacts and CSV outputs.

Every JSON artifact carries ``schema_version``, ``kind`` and the config hash
of the run that produced it, and is written with sorted keys so identical
inputs give identical bytes.
"""
import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from errors import ArtifactMismatch

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

CALIBRATION = "calibration"
TRANSITIONS = "transitions"
LINK_MODEL = "link_model"
POLICY = "policy"
FSM_ANALYSIS = "fsm_analysis"
LINKSTATS = "linkstats"

FILENAMES = {
    CALIBRATION: "calibration.json",
    TRANSITIONS: "transitions.json",
    LINK_MODEL: "link_model.json",
    POLICY: "policy.json",
    FSM_ANALYSIS: "fsm_analysis.json",
    LINKSTATS: "linkstats.json",
}

FIGURE_HEADERS = {
    "fig_se_vs_power.csv": ["policy", "mode", "snr_pre_db", "power_dbm", "spectral_efficiency",
                            "se_ci_low", "se_ci_high", "status"],
    "fig_se_vs_tdt.csv": ["policy", "mode", "dt_duration", "spectral_efficiency", "se_ci_low",
                          "se_ci_high", "power_dbm", "status"],
    "fig_scenarios.csv": ["label", "users", "mean_speed", "policy", "mode", "spectral_efficiency",
                          "se_ci_low", "se_ci_high", "status"],
}

CONVERGENCE_HEADER = ["n", "lambda", "power_w", "power_dbm", "spectral_efficiency", "lagrangian", "value_residual"]


def _clean(value):
    """Non-finite floats become null so the output stays strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def dumps(payload: dict) -> str:
    return json.dumps(_clean(payload), sort_keys=True, indent=1, allow_nan=False) + "\n"


def artifact_path(out_dir, kind: str) -> Path:
    return Path(out_dir) / FILENAMES[kind]


def write_artifact(out_dir, kind: str, payload: dict, config_hash: str) -> Path:
    path = artifact_path(out_dir, kind)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(payload)
    document.update(schema_version=SCHEMA_VERSION, kind=kind, config_hash=config_hash)
    path.write_text(dumps(document))
    logger.info("wrote %s", path)
    return path


def read_artifact(out_dir, kind: str, expected_hash: Optional[str] = None) -> dict:
    path = artifact_path(out_dir, kind)
    if not path.exists():
        raise ArtifactMismatch(f"missing artifact {path}", path=str(path))
    data = json.loads(path.read_text())
    if data.get("kind") != kind or data.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactMismatch(
            f"{path} is not a version {SCHEMA_VERSION} {kind} artifact",
            path=str(path), found_kind=data.get("kind"), found_version=data.get("schema_version"),
        )
    if expected_hash is not None and data.get("config_hash") != expected_hash:
        raise ArtifactMismatch(
            f"{path} was built from a different configuration",
            path=str(path), expected=expected_hash, found=data.get("config_hash"),
        )
    return data


# ── CSV ───────────────────────────────────────────────────────────────────────
def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Dict]) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format(row.get(col)) for col in header])
    return output.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows))
    logger.info("wrote %s", path)
    return path


def figure_rows(variable: str, rows: Sequence[Dict]) -> Dict[str, List[Dict]]:
    """Re-key sweep rows onto the axes of the matching figure CSV."""
    if variable == "snr_pre_db":
        return {"fig_se_vs_power.csv": [dict(r, snr_pre_db=r["value"]) for r in rows]}
    if variable == "dt_duration":
        return {"fig_se_vs_tdt.csv": [dict(r, dt_duration=r["value"]) for r in rows]}
    return {"fig_scenarios.csv": [dict(r, label=r["value"]) for r in rows]}


def write_figures(out_dir, variable: str, rows: Sequence[Dict]) -> List[Path]:
    return [
        write_csv(Path(out_dir) / name, FIGURE_HEADERS[name], fig_rows)
        for name, fig_rows in figure_rows(variable, rows).items()
    ]

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .formats import (
    FORMAT_VERSION,
    MANIFEST_FILE,
    ORACLE_HEADER,
    PREDICTION_HEADER,
    QSS_HEADER,
    QSS_REFERENCE_HEADER,
    SURVIVAL_HEADER,
    TAU_HEADER,
    TAU_SWEEP_HEADER,
    TRAJECTORIES_FILE,
    VALIDATE_HEADER,
)
from .tracing import REQUIRED_FIELDS, TRACE_FILE

CSV_HEADERS = {
    "survival.csv": SURVIVAL_HEADER,
    "qss.csv": QSS_HEADER,
    "qss_reference.csv": QSS_REFERENCE_HEADER,
    "tau.csv": TAU_HEADER,
    "tau_sweep.csv": TAU_SWEEP_HEADER,
    "prediction.csv": PREDICTION_HEADER,
    "validate.csv": VALIDATE_HEADER,
    "oracle.csv": ORACLE_HEADER,
}
TRAJECTORY_KEYS = {"id", "seed", "values", "fpt"}
PREDICTION_FLAGS = {"ok", "extrapolated", "divergent"}


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows: list[dict[str, Any]] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def _csv_lines(path: Path) -> list[list[str]]:
    raw = path.read_bytes()
    if b"\r\n" in raw:
        raise AssertionError(f"{path.name} must use LF line endings")
    return [line.split(",") for line in raw.decode("utf-8").splitlines()]


def _validate_manifest(run_dir: Path) -> dict[str, Any]:
    manifest = read_json(run_dir / MANIFEST_FILE)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise AssertionError(f"manifest format_version must be {FORMAT_VERSION!r}")
    digest = manifest.get("config_digest", "")
    if len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
        raise AssertionError("manifest config_digest must be a sha256 hex string")
    return manifest


def _validate_trajectories(run_dir: Path, manifest: dict[str, Any]) -> None:
    rows = read_jsonl(run_dir / TRAJECTORIES_FILE)
    if len(rows) != manifest["n_trajectories"]:
        raise AssertionError(f"expected {manifest['n_trajectories']} trajectories, found {len(rows)}")
    horizon = manifest["horizon"]
    n_absorbed = 0
    for row in rows:
        if set(row) != TRAJECTORY_KEYS:
            raise AssertionError(f"trajectory keys {sorted(row)} != {sorted(TRAJECTORY_KEYS)}")
        fpt = row["fpt"]
        if fpt is None:
            if len(row["values"]) != horizon + 1:
                raise AssertionError(f"censored trajectory {row['id']} must span the horizon")
        else:
            n_absorbed += 1
            if not 1 <= fpt <= horizon or len(row["values"]) != fpt + 1:
                raise AssertionError(f"trajectory {row['id']} has inconsistent fpt {fpt}")
    if n_absorbed != manifest["n_absorbed"]:
        raise AssertionError(f"manifest says {manifest['n_absorbed']} absorbed, found {n_absorbed}")


def _validate_survival(lines: list[list[str]]) -> None:
    psi = [float(row[1]) for row in lines[1:]]
    if not psi or psi[0] != 1.0:
        raise AssertionError("survival.csv must start with psi = 1 at t = 0")
    if any(b > a for a, b in zip(psi, psi[1:])):
        raise AssertionError("survival.csv psi must be non-increasing")


def _validate_csvs(run_dir: Path) -> None:
    for name, header in CSV_HEADERS.items():
        path = run_dir / name
        if not path.exists():
            continue
        lines = _csv_lines(path)
        if not lines or tuple(lines[0][: len(header)]) != header:
            raise AssertionError(f"{name} header must start with {list(header)}")
        if name == "survival.csv":
            _validate_survival(lines)
        if name == "prediction.csv":
            flags = {row[-1] for row in lines[1:]}
            if not flags <= PREDICTION_FLAGS:
                raise AssertionError(f"unknown prediction flags {sorted(flags - PREDICTION_FLAGS)}")


def _validate_trace(run_dir: Path) -> None:
    path = run_dir / TRACE_FILE
    if not path.exists():
        return
    events = read_jsonl(path)
    ids = {e.get("decision_id") for e in events}
    for event in events:
        for field in REQUIRED_FIELDS:
            if field not in event:
                raise AssertionError(f"Missing field {field} in event {event}")
        if not isinstance(event["lineage"], list):
            raise AssertionError("lineage must be a list")
        for parent in event["lineage"]:
            if parent not in ids:
                raise AssertionError(f"Unknown lineage decision_id {parent}")


def verify_outputs(run_dir: Path | str = Path("out")) -> None:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise AssertionError(f"missing run directory {run_dir}")
    if (run_dir / TRAJECTORIES_FILE).exists():
        manifest = _validate_manifest(run_dir)
        _validate_trajectories(run_dir, manifest)
    _validate_csvs(run_dir)
    _validate_trace(run_dir)


if __name__ == "__main__":
    verify_outputs()
    print("Verification passed")

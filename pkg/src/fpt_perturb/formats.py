"""On-disk formats: manifest JSON, trajectory JSONL and analysis CSVs."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .core import Ensemble, SurvivalCurve, Target, Trajectory
from .errors import InvalidDataError, RuntimeIOError

FORMAT_VERSION = "1"
MANIFEST_FILE = "manifest.json"
TRAJECTORIES_FILE = "trajectories.jsonl"

SURVIVAL_HEADER = ("t", "psi", "at_risk")
QSS_HEADER = ("t", "ks_stat", "p_value", "cvm")
QSS_REFERENCE_HEADER = ("A", "cdf")
TAU_HEADER = ("name", "p_star", "tau_bar", "stderr", "n", "n_censored")
TAU_SWEEP_HEADER = ("name", "P", "tau_bar", "stderr", "n", "n_censored", "regime")
PREDICTION_HEADER = ("name", "P", "e_tp", "e_tp_stderr", "speedup", "flag")
VALIDATE_HEADER = ("name", "P", "empirical_mean", "stderr", "n", "n_absorbed", "n_censored")
ORACLE_HEADER = ("P", "exact_e_tp", "exact_tau", "psi_P", "flag")


def quantile_column(q: float) -> str:
    return f"q{q * 100:g}"


@dataclass(frozen=True)
class Manifest:
    format_version: str
    config_digest: str
    created: str
    n_trajectories: int
    horizon: int
    n_absorbed: int
    n_censored: int
    master_seed: int
    process_fingerprint: str
    target: dict[str, Any]
    process: dict[str, Any]
    protocol: dict[str, Any]

    def to_mapping(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Any) -> Manifest:
        if not isinstance(data, dict):
            raise InvalidDataError("manifest must be a JSON object")
        try:
            return cls(**{name: data[name] for name in cls.__dataclass_fields__})
        except KeyError as exc:
            raise InvalidDataError(f"manifest is missing {exc.args[0]!r}") from exc


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def read_csv(path: Path, header: Sequence[str] | None = None) -> list[dict[str, str]]:
    try:
        with path.open("r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            rows = list(reader)
            fields = tuple(reader.fieldnames or ())
    except OSError as exc:
        raise RuntimeIOError(f"cannot read {path}: {exc}") from exc
    if header is not None and fields[: len(header)] != tuple(header):
        raise InvalidDataError(f"{path}: expected columns {list(header)}, got {list(fields)}")
    return rows


def optional_float(text: str) -> float | None:
    return float(text) if text != "" else None


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RuntimeIOError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidDataError(f"{path} is not valid JSON: {exc}") from exc


def trajectory_line(traj: Trajectory) -> str:
    return json.dumps(
        {"id": traj.id, "seed": traj.seed, "values": list(traj.values), "fpt": traj.fpt},
        sort_keys=True,
    )


def write_trajectories(path: Path, ensemble: Ensemble) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for traj in ensemble.trajectories:
            f.write(trajectory_line(traj) + "\n")


def _parse_trajectory(line: str, lineno: int, horizon: int) -> Trajectory:
    try:
        row = json.loads(line)
        fpt = row["fpt"]
        values = row["values"]
        return Trajectory(
            id=int(row["id"]),
            seed=int(row["seed"]),
            values=tuple(values),
            fpt=None if fpt is None else int(fpt),
            censored_at=horizon if fpt is None else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidDataError(f"trajectory line {lineno}: {exc}") from exc


def read_ensemble(run_dir: Path) -> tuple[Ensemble, Manifest]:
    manifest = Manifest.from_mapping(read_json(run_dir / MANIFEST_FILE))
    if manifest.format_version != FORMAT_VERSION:
        raise InvalidDataError(f"unsupported format_version {manifest.format_version!r}")
    path = run_dir / TRAJECTORIES_FILE
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise RuntimeIOError(f"cannot read {path}: {exc}") from exc
    trajectories = [
        _parse_trajectory(line, lineno, manifest.horizon)
        for lineno, line in enumerate(lines, start=1)
        if line.strip()
    ]
    if len(trajectories) != manifest.n_trajectories:
        raise InvalidDataError(
            f"{path}: {len(trajectories)} trajectories, manifest says {manifest.n_trajectories}"
        )
    ensemble = Ensemble(
        trajectories=tuple(trajectories),
        target=Target.from_mapping(manifest.target),
        horizon=manifest.horizon,
        process_fingerprint=manifest.process_fingerprint,
        master_seed=manifest.master_seed,
    )
    return ensemble, manifest


def write_survival(path: Path, curve: SurvivalCurve) -> None:
    write_csv(path, SURVIVAL_HEADER, zip(range(curve.horizon + 1), curve.psi.tolist(), curve.at_risk.tolist()))


def read_survival(path: Path) -> SurvivalCurve:
    rows = read_csv(path, SURVIVAL_HEADER)
    if len(rows) < 2:
        raise InvalidDataError(f"{path}: a survival curve needs epochs 0..horizon with horizon >= 1")
    try:
        ts = [int(r["t"]) for r in rows]
        psi = np.array([float(r["psi"]) for r in rows])
        at_risk = np.array([int(r["at_risk"]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise InvalidDataError(f"{path}: {exc}") from exc
    if ts != list(range(len(rows))):
        raise InvalidDataError(f"{path}: epochs must run 0, 1, 2, ... without gaps")
    if not math.isclose(psi[0], 1.0):
        raise InvalidDataError(f"{path}: psi[0] must be 1")
    return SurvivalCurve(
        psi=psi,
        at_risk=at_risk,
        n_total=int(at_risk[0]),
        fully_absorbed=bool(psi[-1] == 0),
    )


@dataclass(frozen=True)
class TauRow:
    name: str
    p_star: int
    tau_bar: float | None
    stderr: float | None
    n: int
    n_censored: int


def read_tau(path: Path) -> list[TauRow]:
    rows = read_csv(path, TAU_HEADER)
    try:
        out = [
            TauRow(
                name=r["name"],
                p_star=int(r["p_star"]),
                tau_bar=optional_float(r["tau_bar"]),
                stderr=optional_float(r["stderr"]),
                n=int(r["n"]),
                n_censored=int(r["n_censored"]),
            )
            for r in rows
        ]
    except ValueError as exc:
        raise InvalidDataError(f"{path}: {exc}") from exc
    if not out:
        raise InvalidDataError(f"{path} lists no perturbations")
    return out

"""Run configuration: YAML loading, command-line overrides and the config digest."""
from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .errors import InvalidDataError, RuntimeIOError, UsageError
from .perturb import PerturbationSpec
from .processes import ProcessSpec, canonical_json
from .qss import DEFAULT_ALPHA
from .simulate import Protocol

logger = logging.getLogger(__name__)

THREADS_ENV = "FPT_PERTURB_THREADS"
DEFAULT_QUANTILES = (0.1, 0.9)
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass(frozen=True)
class AnalysisConfig:
    window: tuple[int, int] | None = None
    alpha: float = DEFAULT_ALPHA
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    p_grid: tuple[int, ...] | None = None
    p_star: int | None = None
    residual_horizon: int | None = None
    t_r: int | None = None
    baseline: float | None = None
    min_survivors: int = 20

    def to_mapping(self) -> dict[str, Any]:
        return {
            "window": list(self.window) if self.window else None,
            "alpha": self.alpha,
            "quantiles": list(self.quantiles),
            "p_grid": list(self.p_grid) if self.p_grid else None,
            "p_star": self.p_star,
            "residual_horizon": self.residual_horizon,
            "t_r": self.t_r,
            "baseline": self.baseline,
            "min_survivors": self.min_survivors,
        }

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> AnalysisConfig:
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidDataError(f"unknown analysis keys: {sorted(unknown)}")
        window = data.get("window")
        grid = data.get("p_grid")
        quantiles = data.get("quantiles", DEFAULT_QUANTILES)
        return cls(
            window=_parse_window(window) if window is not None else None,
            alpha=_field(data, "alpha", float, DEFAULT_ALPHA),
            quantiles=_parse_quantile_list(quantiles),
            p_grid=_parse_grid(grid) if grid is not None else None,
            p_star=_field(data, "p_star", int),
            residual_horizon=_field(data, "residual_horizon", int),
            t_r=_field(data, "t_r", int),
            baseline=_field(data, "baseline", float),
            min_survivors=_field(data, "min_survivors", int, 20),
        )


@dataclass(frozen=True)
class RunConfig:
    process: ProcessSpec
    protocol: Protocol = field(default_factory=Protocol)
    n_trajectories: int = 1000
    master_seed: int | None = None
    output_dir: Path = Path("out")
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    perturbations: tuple[tuple[str, PerturbationSpec], ...] = ()

    def __post_init__(self) -> None:
        if self.n_trajectories < 1:
            raise InvalidDataError("n_trajectories must be positive")
        if self.master_seed is not None and not 0 <= self.master_seed < 2**64:
            raise InvalidDataError("master_seed must be an unsigned 64-bit integer")
        names = [name for name, _ in self.perturbations]
        if len(set(names)) != len(names):
            raise InvalidDataError("perturbation names must be unique")
        for name in names:
            if not _NAME_RE.match(name):
                raise InvalidDataError(f"perturbation name {name!r} may only use letters, digits, '_', '.', '-'")

    def require_seed(self) -> int:
        if self.master_seed is None:
            raise UsageError("no master seed: set master_seed, pass --seed, or pass --seed-from-entropy")
        return self.master_seed

    def to_mapping(self) -> dict[str, Any]:
        return {
            "process": self.process.to_mapping(),
            "protocol": self.protocol.to_mapping(),
            "n_trajectories": self.n_trajectories,
            "master_seed": self.master_seed,
            "analysis": self.analysis.to_mapping(),
            "perturbations": [{"name": n, **p.to_mapping()} for n, p in self.perturbations],
        }

    def digest(self) -> str:
        """sha256 of the canonical JSON form; the output directory is not part of it."""
        return hashlib.sha256(canonical_json(self.to_mapping()).encode("utf-8")).hexdigest()


def _field(data: Mapping[str, Any], key: str, kind: type, default: Any = None) -> Any:
    value = data.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or (kind is int and isinstance(value, float) and not value.is_integer()):
        raise InvalidDataError(f"{key} must be {kind.__name__}, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise InvalidDataError(f"{key} must be {kind.__name__}, got {value!r}") from exc


def _parse_quantile_list(value: Any) -> tuple[float, ...]:
    if isinstance(value, str):
        return parse_quantiles(value)
    try:
        return tuple(float(q) for q in value)
    except (TypeError, ValueError) as exc:
        raise InvalidDataError(f"quantiles must be a list of numbers, got {value!r}") from exc


def _parse_window(value: Any) -> tuple[int, int]:
    try:
        parts = value.split(":") if isinstance(value, str) else list(value)
        t1, t2 = (int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise InvalidDataError(f"window must be t1:t2, got {value!r}") from exc
    return t1, t2


def _parse_grid(value: Any) -> tuple[int, ...]:
    """``a:b:step`` (inclusive of b), ``a:b``, a comma list, or a list of integers."""
    try:
        if isinstance(value, str) and ":" in value:
            parts = [int(p) for p in value.split(":")]
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] < 1):
                raise ValueError(value)
            step = parts[2] if len(parts) == 3 else 1
            grid = tuple(range(parts[0], parts[1] + 1, step))
        elif isinstance(value, str):
            grid = tuple(int(p) for p in value.split(",") if p.strip())
        elif isinstance(value, int):
            grid = (value,)
        else:
            grid = tuple(int(p) for p in value)
    except (TypeError, ValueError) as exc:
        raise InvalidDataError(f"P grid must be a:b:step or a comma list, got {value!r}") from exc
    if not grid:
        raise InvalidDataError(f"P grid {value!r} is empty")
    return grid


def parse_window(value: str) -> tuple[int, int]:
    return _parse_window(value)


def parse_grid(value: str) -> tuple[int, ...]:
    return _parse_grid(value)


def parse_quantiles(value: str) -> tuple[float, ...]:
    try:
        return tuple(float(q) for q in value.split(",") if q.strip())
    except ValueError as exc:
        raise InvalidDataError(f"quantiles must be a comma list of numbers, got {value!r}") from exc


def _perturbation_list(data: Any) -> tuple[tuple[str, PerturbationSpec], ...]:
    if data is None:
        return ()
    if not isinstance(data, list):
        raise InvalidDataError("perturbations must be a list")
    out = []
    for item in data:
        if not isinstance(item, Mapping):
            raise InvalidDataError(f"perturbation entry must be a mapping, got {item!r}")
        spec = PerturbationSpec.from_mapping(item)
        out.append((str(item.get("name", spec.kind.value)), spec))
    return tuple(out)


def config_from_mapping(data: Any, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise InvalidDataError("run config must parse to an object")
    unknown = set(data) - {
        "process",
        "protocol",
        "perturbations",
        "n_trajectories",
        "master_seed",
        "output_dir",
        "analysis",
    }
    if unknown:
        raise InvalidDataError(f"unknown config keys: {sorted(unknown)}")
    if "process" not in data:
        raise InvalidDataError("run config needs a process section")
    for section in ("process", "protocol", "analysis"):
        if data.get(section) is not None and not isinstance(data[section], Mapping):
            raise InvalidDataError(f"{section} must be a mapping, got {data[section]!r}")
    return RunConfig(
        process=ProcessSpec.from_mapping(data["process"], base_dir=base_dir),
        protocol=Protocol.from_mapping(data.get("protocol")),
        n_trajectories=_field(data, "n_trajectories", int, 1000),
        master_seed=_field(data, "master_seed", int),
        output_dir=Path(str(data.get("output_dir", "out"))),
        analysis=AnalysisConfig.from_mapping(data.get("analysis")),
        perturbations=_perturbation_list(data.get("perturbations")),
    )


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise RuntimeIOError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidDataError(f"{path} is not valid YAML: {exc}") from exc
    return config_from_mapping(data, base_dir=path.parent)


def with_overrides(
    config: RunConfig,
    *,
    seed: int | None = None,
    seed_from_entropy: bool = False,
    out: Path | None = None,
    p_star: int | None = None,
    p_grid: Sequence[int] | None = None,
    alpha: float | None = None,
    window: tuple[int, int] | None = None,
    quantiles: Sequence[float] | None = None,
) -> RunConfig:
    analysis = config.analysis
    updates: dict[str, Any] = {}
    for key, value in (
        ("p_star", p_star),
        ("p_grid", tuple(p_grid) if p_grid is not None else None),
        ("alpha", alpha),
        ("window", window),
        ("quantiles", tuple(quantiles) if quantiles is not None else None),
    ):
        if value is not None:
            updates[key] = value
    if updates:
        analysis = replace(analysis, **updates)
    master_seed = config.master_seed
    if seed is not None and seed_from_entropy:
        raise UsageError("--seed and --seed-from-entropy are mutually exclusive")
    if seed is not None:
        master_seed = seed
    elif seed_from_entropy:
        master_seed = int(np.random.SeedSequence().entropy) % 2**64
        logger.warning("master seed drawn from entropy: %d", master_seed)
    return replace(
        config,
        master_seed=master_seed,
        output_dir=out if out is not None else config.output_dir,
        analysis=analysis,
    )


def resolve_threads(value: int | None) -> int:
    if value is None:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            value = int(raw)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise UsageError(f"threads must be positive, got {value}")
    return value

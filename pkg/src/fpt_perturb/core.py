"""First-passage extraction and survival estimation over trajectory ensembles."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import CensoredBaselineError, InvalidDataError, OutOfHorizonError


class Direction(str, Enum):
    AT_LEAST = "at_least"
    AT_MOST = "at_most"


@dataclass(frozen=True)
class Target:
    """Absorbing threshold on the collective variable; ties count as reached."""

    value: float
    direction: Direction = Direction.AT_LEAST

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "direction", Direction(self.direction))
        if not math.isfinite(self.value):
            raise InvalidDataError(f"target value must be finite, got {self.value}")

    def reached(self, a: float) -> bool:
        if self.direction is Direction.AT_LEAST:
            return a >= self.value
        return a <= self.value

    def reached_mask(self, values: np.ndarray) -> np.ndarray:
        if self.direction is Direction.AT_LEAST:
            return values >= self.value
        return values <= self.value

    def is_no_harder_than(self, other: Target) -> bool:
        if self.direction is not other.direction:
            return False
        if self.direction is Direction.AT_LEAST:
            return self.value <= other.value
        return self.value >= other.value

    def to_mapping(self) -> dict[str, Any]:
        return {"value": self.value, "direction": self.direction.value}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> Target:
        try:
            return cls(value=data["value"], direction=data.get("direction", Direction.AT_LEAST))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidDataError(f"invalid target {data!r}: {exc}") from exc


@dataclass(frozen=True)
class Trajectory:
    id: int
    seed: int
    values: tuple[float, ...]
    fpt: int | None = None
    censored_at: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.id < 0:
            raise InvalidDataError(f"trajectory id must be non-negative, got {self.id}")
        if (self.fpt is None) == (self.censored_at is None):
            raise InvalidDataError(f"trajectory {self.id}: exactly one of fpt/censored_at must be set")
        end = self.fpt if self.fpt is not None else self.censored_at
        if end is None or end < 1:
            raise InvalidDataError(f"trajectory {self.id}: end epoch must be positive")
        if len(self.values) != end + 1:
            raise InvalidDataError(
                f"trajectory {self.id}: expected {end + 1} values, got {len(self.values)}"
            )

    @property
    def end(self) -> int:
        return self.fpt if self.fpt is not None else int(self.censored_at)  # type: ignore[arg-type]

    @property
    def absorbed(self) -> bool:
        return self.fpt is not None


@dataclass(frozen=True)
class Ensemble:
    trajectories: tuple[Trajectory, ...]
    target: Target
    horizon: int
    process_fingerprint: str = ""
    master_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise InvalidDataError("ensemble must contain at least one trajectory")
        if self.horizon < 1:
            raise InvalidDataError(f"horizon must be positive, got {self.horizon}")
        ids = [t.id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise InvalidDataError("trajectory ids must be unique")
        for traj in self.trajectories:
            _check_against_target(traj, self.target, self.horizon)

    @property
    def n(self) -> int:
        return len(self.trajectories)

    def stop_epochs(self) -> np.ndarray:
        """Absorption epoch per trajectory; censored ones map to horizon + 1."""
        return np.array(
            [t.fpt if t.fpt is not None else self.horizon + 1 for t in self.trajectories],
            dtype=np.int64,
        )

    def value_matrix(self) -> np.ndarray:
        """(N, horizon+1) values, NaN from each trajectory's absorption epoch on."""
        out = np.full((self.n, self.horizon + 1), np.nan)
        for row, traj in enumerate(self.trajectories):
            keep = traj.end if traj.absorbed else traj.end + 1
            out[row, :keep] = traj.values[:keep]
        return out


def _check_against_target(traj: Trajectory, target: Target, horizon: int) -> None:
    if traj.fpt is not None:
        if traj.fpt > horizon:
            raise InvalidDataError(f"trajectory {traj.id}: fpt {traj.fpt} beyond horizon {horizon}")
    elif traj.censored_at != horizon:
        raise InvalidDataError(
            f"trajectory {traj.id}: censored at {traj.censored_at}, ensemble horizon is {horizon}"
        )
    found = extract_fpt(traj.values, target)
    if found != traj.fpt:
        raise InvalidDataError(
            f"trajectory {traj.id}: recorded fpt {traj.fpt} disagrees with values (first crossing {found})"
        )


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    psi: np.ndarray
    at_risk: np.ndarray
    n_total: int
    fully_absorbed: bool
    exact: bool = False

    def __post_init__(self) -> None:
        psi = np.array(self.psi, dtype=float)
        at_risk = np.array(self.at_risk, dtype=np.int64)
        if psi.ndim != 1 or psi.size < 2:
            raise InvalidDataError("survival curve needs psi for epochs 0..horizon with horizon >= 1")
        if at_risk.shape != psi.shape:
            raise InvalidDataError("psi and at_risk must have the same length")
        if self.n_total < 1:
            raise InvalidDataError("n_total must be positive")
        if np.any(psi < 0) or np.any(psi > 1) or np.any(np.diff(psi) > 0):
            raise InvalidDataError("psi must lie in [0, 1] and be non-increasing")
        if bool(self.fully_absorbed) != bool(psi[-1] == 0):
            raise InvalidDataError("fully_absorbed must hold exactly when psi[horizon] == 0")
        psi.setflags(write=False)
        at_risk.setflags(write=False)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "at_risk", at_risk)

    @property
    def horizon(self) -> int:
        return int(self.psi.size - 1)

    @classmethod
    def from_counts(cls, at_risk: Sequence[int] | np.ndarray, n_total: int) -> SurvivalCurve:
        counts = np.asarray(at_risk, dtype=np.int64)
        psi = counts / float(n_total)
        return cls(psi=psi, at_risk=counts, n_total=n_total, fully_absorbed=bool(counts[-1] == 0))

    @classmethod
    def from_exact(cls, psi: Sequence[float] | np.ndarray) -> SurvivalCurve:
        values = np.clip(np.minimum.accumulate(np.asarray(psi, dtype=float)), 0.0, 1.0)
        return cls(
            psi=values,
            at_risk=np.rint(values).astype(np.int64),
            n_total=1,
            fully_absorbed=bool(values[-1] == 0),
            exact=True,
        )


@dataclass(frozen=True)
class FptSample:
    times: tuple[int, ...]
    n_censored: int
    horizon: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        if self.n_censored < 0:
            raise InvalidDataError("n_censored must be non-negative")
        if any(t < 1 or t > self.horizon for t in self.times):
            raise InvalidDataError(f"first-passage times must lie in 1..{self.horizon}")


def extract_fpt(values: Sequence[float] | np.ndarray, target: Target) -> int | None:
    """Smallest epoch t >= 1 whose value satisfies ``target``; index 0 never absorbs."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidDataError("values must be a non-empty sequence")
    if not np.all(np.isfinite(arr)):
        raise InvalidDataError("values contain non-finite entries")
    hits = np.flatnonzero(target.reached_mask(arr[1:]))
    if hits.size == 0:
        return None
    return int(hits[0]) + 1


def estimate_survival(ensemble: Ensemble) -> SurvivalCurve:
    stops = ensemble.stop_epochs()
    epochs = np.arange(ensemble.horizon + 1)
    at_risk = (stops[None, :] > epochs[:, None]).sum(axis=1)
    return SurvivalCurve.from_counts(at_risk, ensemble.n)


def fpt_sample(ensemble: Ensemble) -> FptSample:
    times = tuple(t.fpt for t in ensemble.trajectories if t.fpt is not None)
    return FptSample(times=times, n_censored=ensemble.n - len(times), horizon=ensemble.horizon)


def mean_fpt(sample: FptSample) -> float:
    if sample.n_censored > 0:
        raise CensoredBaselineError(sample.n_censored)
    if not sample.times:
        raise InvalidDataError("empty first-passage sample")
    return math.fsum(sample.times) / len(sample.times)


def partial_sum(curve: SurvivalCurve, P: int) -> float:
    """Sum of psi[0..P-1]; the perturbation-independent lower bound on E[T_P]."""
    if P < 1 or P > curve.horizon:
        raise OutOfHorizonError(P, curve.horizon)
    return math.fsum(curve.psi[:P])


def survival_stderr(curve: SurvivalCurve) -> np.ndarray:
    if curve.exact:
        return np.zeros_like(curve.psi)
    return np.sqrt(curve.psi * (1.0 - curve.psi) / curve.n_total)


def retarget(ensemble: Ensemble, target: Target) -> Ensemble:
    """Re-derive first passages for an easier-or-equal threshold of the same direction."""
    if not target.is_no_harder_than(ensemble.target):
        raise InvalidDataError(
            f"cannot retarget to {target.to_mapping()}: recorded trajectories stop at "
            f"{ensemble.target.to_mapping()}"
        )
    rebuilt = []
    for traj in ensemble.trajectories:
        fpt = extract_fpt(traj.values, target)
        if fpt is None:
            rebuilt.append(traj)
        else:
            rebuilt.append(
                Trajectory(id=traj.id, seed=traj.seed, values=traj.values[: fpt + 1], fpt=fpt)
            )
    return replace(ensemble, trajectories=tuple(rebuilt), target=target)


@dataclass(frozen=True, eq=False)
class MetricStats:
    """Per-epoch mean, quantiles and at-risk count of the collective variable over survivors."""

    epochs: np.ndarray
    mean: np.ndarray
    quantiles: tuple[float, ...]
    quantile_values: np.ndarray
    at_risk: np.ndarray
    offset: int = 0

    def column(self, q: float) -> np.ndarray:
        return self.quantile_values[:, self.quantiles.index(q)]


def _check_quantiles(quantiles: Iterable[float]) -> tuple[float, ...]:
    qs = tuple(float(q) for q in quantiles)
    if any(not 0.0 <= q <= 1.0 for q in qs):
        raise InvalidDataError(f"quantiles must lie in [0, 1], got {qs}")
    return qs


def _stats_from_matrix(matrix: np.ndarray, quantiles: tuple[float, ...]) -> MetricStats:
    at_risk = np.sum(~np.isnan(matrix), axis=0)
    # rows stop at the first epoch without survivors
    empty = np.flatnonzero(at_risk == 0)
    last = int(empty[0]) if empty.size else matrix.shape[1]
    means = np.empty(last)
    qvals = np.empty((last, len(quantiles)))
    for t in range(last):
        col = matrix[:, t]
        col = col[~np.isnan(col)]
        means[t] = col.mean()
        if quantiles:
            qvals[t] = np.quantile(col, quantiles, method="lower")
    return MetricStats(
        epochs=np.arange(last),
        mean=means,
        quantiles=quantiles,
        quantile_values=qvals,
        at_risk=at_risk[:last].astype(np.int64),
    )


def conditional_metric_stats(ensemble: Ensemble, quantiles: Sequence[float]) -> MetricStats:
    """Mean and lower-interpolation quantiles of A over trajectories surviving each epoch."""
    return _stats_from_matrix(ensemble.value_matrix(), _check_quantiles(quantiles))


def centered_metric_stats(
    paths: Sequence[Sequence[float]],
    absorbed: Sequence[bool],
    quantiles: Sequence[float],
    offset: int = 0,
) -> MetricStats:
    """Same table for post-perturbation paths aligned at the perturbation epoch.

    ``paths[i][s]`` is A at ``s`` epochs after the perturbation (s = 0 is the value
    recorded just before it); a path that absorbed ends with its absorbing value.
    """
    qs = _check_quantiles(quantiles)
    if not paths:
        raise InvalidDataError("no post-perturbation paths")
    width = max(len(p) for p in paths)
    matrix = np.full((len(paths), width), np.nan)
    for row, (path, hit) in enumerate(zip(paths, absorbed)):
        keep = len(path) - 1 if hit else len(path)
        matrix[row, :keep] = path[:keep]
    stats = _stats_from_matrix(matrix, qs)
    return replace(stats, offset=offset)

"""Mean first-passage time under periodic perturbation, predicted from survival data.

Three routes share one identity, E[T_P] = sum_{t<P} psi(t) + psi(P) * tau_bar_P:

* ``predict_general`` takes tau_bar_P as given,
* ``predict_sr`` closes it for full resetting, where tau_bar_P = E[T_P],
* ``predict_rare`` uses a single tau_bar measured at P* for every P up to P*.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .core import SurvivalCurve, partial_sum, survival_stderr
from .errors import CensoredBaselineError, InvalidComparisonError, InvalidDataError, OutOfHorizonError
from .simulate import ResidualSample, mean_residual, residual_stderr

logger = logging.getLogger(__name__)


class Divergent:
    """Marker for a mean first-passage time that is infinite under the protocol."""

    _instance: Divergent | None = None

    def __new__(cls) -> Divergent:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DIVERGENT"


DIVERGENT = Divergent()

EValue = Union[float, Divergent]


class Method(str, Enum):
    GENERAL = "general"
    SR = "sr"
    RARE = "rare"


@dataclass(frozen=True)
class TauSource:
    p_star: int
    tau_bar: float
    stderr: float


@dataclass(frozen=True)
class Baseline:
    mean: float
    stderr: float


@dataclass(frozen=True)
class PredictionCurve:
    P_values: tuple[int, ...]
    e_tp: tuple[EValue, ...]
    e_tp_stderr: tuple[float, ...]
    method: Method
    valid_range: tuple[int, int]
    speedup: tuple[float | None, ...] = ()
    tau_source: TauSource | None = None
    baseline: Baseline | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if not self.P_values or any(b <= a for a, b in zip(self.P_values, self.P_values[1:])):
            raise InvalidDataError("P_values must be non-empty and strictly increasing")
        if len(self.e_tp) != len(self.P_values) or len(self.e_tp_stderr) != len(self.P_values):
            raise InvalidDataError("one e_tp and stderr per P is required")
        if not self.speedup:
            object.__setattr__(self, "speedup", (None,) * len(self.P_values))
        elif len(self.speedup) != len(self.P_values):
            raise InvalidDataError("one speedup entry per P is required")

    def in_range(self, P: int) -> bool:
        lo, hi = self.valid_range
        return lo <= P <= hi

    def flags(self) -> list[str]:
        out = []
        for P, e in zip(self.P_values, self.e_tp):
            if e is DIVERGENT:
                out.append("divergent")
            elif not self.in_range(P):
                out.append("extrapolated")
            else:
                out.append("ok")
        return out


@dataclass(frozen=True)
class RankedPerturbation:
    name: str
    p_star: int
    tau_bar: float
    stderr: float
    n: int


@dataclass(frozen=True)
class BestInterval:
    P: int
    e_tp: float
    speedup: float | None


def _check_tau(tau_bar_p: float) -> None:
    if not (math.isfinite(tau_bar_p) and tau_bar_p >= 0):
        raise InvalidDataError(f"tau_bar must be finite and >= 0, got {tau_bar_p}")


def predict_general(curve: SurvivalCurve, P: int, tau_bar_p: float) -> float:
    _check_tau(tau_bar_p)
    return partial_sum(curve, P) + float(curve.psi[P]) * tau_bar_p


def predict_sr(curve: SurvivalCurve, P: int) -> EValue:
    s = partial_sum(curve, P)
    psi_P = float(curve.psi[P])
    if psi_P >= 1.0:
        return DIVERGENT
    return s / (1.0 - psi_P)


def _partial_sum_var(curve: SurvivalCurve, P: int) -> float:
    se = survival_stderr(curve)
    return float(np.sum(se[:P] ** 2))


def _general_stderr(curve: SurvivalCurve, P: int, tau: float, tau_se: float) -> float:
    se_P = float(survival_stderr(curve)[P])
    psi_P = float(curve.psi[P])
    return math.sqrt(_partial_sum_var(curve, P) + (psi_P * tau_se) ** 2 + (tau * se_P) ** 2)


def _sr_stderr(curve: SurvivalCurve, P: int) -> float:
    s = partial_sum(curve, P)
    gap = 1.0 - float(curve.psi[P])
    se_P = float(survival_stderr(curve)[P])
    return math.sqrt(_partial_sum_var(curve, P) / gap**2 + (s * se_P / gap**2) ** 2)


def _check_grid(P_grid: Sequence[int], horizon: int, upper: int | None = None) -> tuple[int, ...]:
    grid = tuple(sorted({int(P) for P in P_grid}))
    if not grid:
        raise InvalidDataError("P grid is empty")
    for P in grid:
        if P < 1 or P > horizon:
            raise OutOfHorizonError(P, horizon)
        if upper is not None and P > upper:
            raise InvalidDataError(f"P={P} exceeds the measurement epoch p_star={upper}")
    return grid


def predict_sr_curve(curve: SurvivalCurve, P_grid: Sequence[int], name: str = "sr") -> PredictionCurve:
    grid = _check_grid(P_grid, curve.horizon)
    e_tp: list[EValue] = []
    errs: list[float] = []
    for P in grid:
        e = predict_sr(curve, P)
        e_tp.append(e)
        errs.append(math.nan if e is DIVERGENT else _sr_stderr(curve, P))
    return PredictionCurve(
        P_values=grid,
        e_tp=tuple(e_tp),
        e_tp_stderr=tuple(errs),
        method=Method.SR,
        valid_range=(1, curve.horizon),
        name=name,
    )


def predict_rare(
    curve: SurvivalCurve,
    tau_sample: ResidualSample,
    t_r: int | None,
    P_grid: Sequence[int],
    name: str = "",
) -> PredictionCurve:
    """E[T_P] for every P in the grid from one residual measurement at p_star.

    Points below max(t_r, ceil(tau_bar)) are still computed and flagged extrapolated.
    """
    tau = TauSource(p_star=tau_sample.p_star, tau_bar=mean_residual(tau_sample), stderr=residual_stderr(tau_sample))
    return predict_rare_from_tau(curve, tau, t_r, P_grid, name=name)


def predict_rare_from_tau(
    curve: SurvivalCurve,
    tau: TauSource,
    t_r: int | None,
    P_grid: Sequence[int],
    name: str = "",
) -> PredictionCurve:
    _check_tau(tau.tau_bar)
    grid = _check_grid(P_grid, curve.horizon, upper=tau.p_star)
    e_tp = tuple(predict_general(curve, P, tau.tau_bar) for P in grid)
    errs = tuple(_general_stderr(curve, P, tau.tau_bar, tau.stderr) for P in grid)
    lo = max(t_r or 1, math.ceil(tau.tau_bar))
    if grid[0] < lo:
        logger.debug("%s: P < %d lies outside the rare-perturbation regime", name or "prediction", lo)
    return PredictionCurve(
        P_values=grid,
        e_tp=e_tp,
        e_tp_stderr=errs,
        method=Method.RARE,
        valid_range=(lo, tau.p_star),
        tau_source=tau,
        name=name,
    )


def speedup(baseline_mean: float, curve: PredictionCurve, baseline_stderr: float = 0.0) -> PredictionCurve:
    if not (math.isfinite(baseline_mean) and baseline_mean > 0):
        raise InvalidDataError(f"baseline mean must be positive, got {baseline_mean}")
    ratios = tuple(0.0 if e is DIVERGENT else baseline_mean / e for e in curve.e_tp)  # type: ignore[operator]
    return replace(curve, speedup=ratios, baseline=Baseline(mean=baseline_mean, stderr=baseline_stderr))


def rank_perturbations(candidates: Sequence[tuple[str, ResidualSample]]) -> list[RankedPerturbation]:
    """Order candidates by mean residual time, smallest first; ties go to the name."""
    if not candidates:
        raise InvalidDataError("no candidates to rank")
    p_stars = {sample.p_star for _, sample in candidates}
    if len(p_stars) > 1:
        raise InvalidComparisonError(f"candidates were measured at different p_star values {sorted(p_stars)}")
    ranked = [
        RankedPerturbation(
            name=name,
            p_star=sample.p_star,
            tau_bar=mean_residual(sample),
            stderr=residual_stderr(sample),
            n=sample.n,
        )
        for name, sample in candidates
    ]
    ranked.sort(key=lambda r: (r.tau_bar, r.name))
    return ranked


def best_interval(curve: PredictionCurve, within_valid: bool = True) -> BestInterval | None:
    """The P with minimal finite E[T_P]; the smallest such P on ties."""
    best: BestInterval | None = None
    for P, e, s in zip(curve.P_values, curve.e_tp, curve.speedup):
        if e is DIVERGENT or (within_valid and not curve.in_range(P)):
            continue
        if best is None or e < best.e_tp:  # type: ignore[operator]
            best = BestInterval(P=P, e_tp=float(e), speedup=s)  # type: ignore[arg-type]
    return best


def baseline_from_curve(curve: SurvivalCurve) -> tuple[float, float]:
    """Unperturbed E[T] and its standard error from a fully absorbed survival curve."""
    if not curve.fully_absorbed:
        raise CensoredBaselineError(int(curve.at_risk[-1]), what="baseline mean first-passage time")
    mean = math.fsum(curve.psi)
    if curve.exact:
        return mean, 0.0
    t = np.arange(1, curve.horizon + 1)
    pmf = curve.psi[:-1] - curve.psi[1:]
    var = max(float(np.sum(t**2 * pmf)) - mean**2, 0.0)
    return mean, math.sqrt(var / curve.n_total)

"""Quasi-steady-state detection by comparing per-epoch CDFs to their window average."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import kolmogorov

from .core import Ensemble, estimate_survival
from .errors import EmptyConditionalError, InvalidDataError

logger = logging.getLogger(__name__)

PVALUE_FLOOR = 1e-12
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True, eq=False)
class EmpiricalCdf:
    """Right-continuous step function; ``cdf_values[i]`` holds on [support[i], support[i+1])."""

    support: np.ndarray
    cdf_values: np.ndarray
    n: int

    def __post_init__(self) -> None:
        support = np.asarray(self.support, dtype=float)
        values = np.asarray(self.cdf_values, dtype=float)
        if support.shape != values.shape or support.size == 0:
            raise InvalidDataError("support and cdf_values must be non-empty and equally long")
        if np.any(np.diff(support) <= 0):
            raise InvalidDataError("support must be strictly increasing")
        if np.any(np.diff(values) < 0) or values[0] < 0 or not math.isclose(values[-1], 1.0):
            raise InvalidDataError("cdf_values must be non-decreasing and end at 1")
        if self.n < 1:
            raise InvalidDataError("n must be positive")
        support.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "cdf_values", values)

    @classmethod
    def from_samples(cls, samples: Sequence[float] | np.ndarray) -> EmpiricalCdf:
        arr = np.asarray(samples, dtype=float)
        if arr.size == 0:
            raise EmptyConditionalError("cannot build a CDF from zero samples")
        support, counts = np.unique(arr, return_counts=True)
        return cls(support=support, cdf_values=np.cumsum(counts) / arr.size, n=int(arr.size))

    def __call__(self, x: np.ndarray | float) -> np.ndarray:
        idx = np.searchsorted(self.support, x, side="right") - 1
        return np.where(idx >= 0, self.cdf_values[np.clip(idx, 0, None)], 0.0)

    def left_limit(self, x: np.ndarray | float) -> np.ndarray:
        idx = np.searchsorted(self.support, x, side="left") - 1
        return np.where(idx >= 0, self.cdf_values[np.clip(idx, 0, None)], 0.0)

    def jumps(self) -> np.ndarray:
        return np.diff(self.cdf_values, prepend=0.0)


@dataclass(frozen=True, eq=False)
class QssReport:
    epochs: np.ndarray
    ks_stat: np.ndarray
    ks_pvalue: np.ndarray
    cvm: np.ndarray
    t_r: int | None
    window: tuple[int, int]
    alpha: float
    reference: EmpiricalCdf


def conditional_cdf(ensemble: Ensemble, t: int, matrix: np.ndarray | None = None) -> EmpiricalCdf:
    """CDF of A over the trajectories that have not been absorbed by epoch ``t``."""
    if t < 0 or t > ensemble.horizon:
        raise InvalidDataError(f"epoch {t} outside 0..{ensemble.horizon}")
    if matrix is None:
        matrix = ensemble.value_matrix()
    col = matrix[:, t]
    col = col[~np.isnan(col)]
    if col.size == 0:
        raise EmptyConditionalError(f"no surviving trajectories at epoch {t}")
    return EmpiricalCdf.from_samples(col)


def average_cdf(cdfs: Sequence[EmpiricalCdf]) -> EmpiricalCdf:
    if not cdfs:
        raise InvalidDataError("average_cdf needs at least one CDF")
    support = np.unique(np.concatenate([c.support for c in cdfs]))
    values = np.mean([c(support) for c in cdfs], axis=0)
    return EmpiricalCdf(support=support, cdf_values=values, n=sum(c.n for c in cdfs))


def ks_statistic(f: EmpiricalCdf, g_ref: EmpiricalCdf) -> float:
    """sup |F - G| over both supports, at the breakpoints and their left limits."""
    points = np.union1d(f.support, g_ref.support)
    at = np.abs(f(points) - g_ref(points))
    before = np.abs(f.left_limit(points) - g_ref.left_limit(points))
    return float(max(at.max(), before.max()))


def ks_pvalue(D: float, n: int) -> float:
    """Asymptotic one-sample Kolmogorov p-value Q_K(sqrt(n) D)."""
    if n < 1:
        raise InvalidDataError(f"sample size must be positive, got {n}")
    if not 0.0 <= D <= 1.0:
        raise InvalidDataError(f"KS statistic must lie in [0, 1], got {D}")
    if D == 0.0:
        return 1.0
    p = float(kolmogorov(math.sqrt(n) * D))
    if p < PVALUE_FLOOR:
        return 0.0
    return min(max(p, 0.0), 1.0)


def cvm_criterion(f: EmpiricalCdf, g_ref: EmpiricalCdf) -> float:
    """Stieltjes sum of (F - G)^2 against the jumps of the reference G."""
    diff = f(g_ref.support) - g_ref.cdf_values
    return float(np.sum(diff**2 * g_ref.jumps()))


def default_window(ensemble: Ensemble, min_survivors: int = 20) -> tuple[int, int]:
    """(20%, 100%) of the horizon, with t2 pulled back to the last well-populated epoch."""
    curve = estimate_survival(ensemble)
    populated = np.flatnonzero(curve.at_risk >= max(1, min_survivors))
    populated = populated[populated >= 1]
    if populated.size == 0:
        raise EmptyConditionalError(f"no epoch has at least {min_survivors} survivors")
    t2 = int(populated[-1])
    if t2 < ensemble.horizon:
        logger.warning(
            "window end pulled back from horizon %d to epoch %d (fewer than %d survivors later)",
            ensemble.horizon,
            t2,
            min_survivors,
        )
    t1 = max(1, math.ceil(0.2 * t2))
    if t1 >= t2:
        raise EmptyConditionalError(f"window ({t1}, {t2}) is too short for relaxation detection")
    return t1, t2


def _sustained_start(epochs: np.ndarray, pvalues: np.ndarray, alpha: float) -> int | None:
    start = None
    for epoch, p in zip(epochs[::-1], pvalues[::-1]):
        if p > alpha:
            start = int(epoch)
        else:
            break
    return start


def detect_relaxation(
    ensemble: Ensemble, window: tuple[int, int], alpha: float = DEFAULT_ALPHA
) -> QssReport:
    t1, t2 = window
    if not 1 <= t1 < t2 <= ensemble.horizon:
        raise InvalidDataError(f"window must satisfy 1 <= t1 < t2 <= {ensemble.horizon}, got {window}")
    if not 0.0 < alpha < 1.0:
        raise InvalidDataError(f"alpha must lie in (0, 1), got {alpha}")
    matrix = ensemble.value_matrix()
    in_window = [conditional_cdf(ensemble, t, matrix) for t in range(t1, t2 + 1)]
    reference = average_cdf(in_window)

    epochs = np.arange(1, t2 + 1)
    ks = np.empty(epochs.size)
    pv = np.empty(epochs.size)
    cvm = np.empty(epochs.size)
    for i, t in enumerate(epochs):
        cdf = in_window[t - t1] if t >= t1 else conditional_cdf(ensemble, int(t), matrix)
        ks[i] = ks_statistic(cdf, reference)
        pv[i] = ks_pvalue(ks[i], cdf.n)
        cvm[i] = cvm_criterion(cdf, reference)

    t_r = _sustained_start(epochs, pv, alpha)
    logger.info("relaxation over window (%d, %d), alpha=%g: t_r=%s", t1, t2, alpha, t_r)
    return QssReport(
        epochs=epochs,
        ks_stat=ks,
        ks_pvalue=pv,
        cvm=cvm,
        t_r=t_r,
        window=(t1, t2),
        alpha=alpha,
        reference=reference,
    )

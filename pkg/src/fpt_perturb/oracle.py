"""Exact survival and mean first-passage quantities for finite absorbing chains.

``Q[i, j]`` is the one-epoch probability of moving from transient state i to
transient state j; the missing row mass is absorption. A state distribution ``p``
evolves as ``Q.T @ p`` and its total mass is the survival probability.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .core import SurvivalCurve
from .errors import (
    EmptyConditionalError,
    IncompatiblePerturbationError,
    InvalidDataError,
    NonAbsorbingError,
    RuntimeIOError,
    TruncationError,
)
from .perturb import PerturbationKind, PerturbationSpec
from .processes import MarkovChainParams, ProcessKind, ProcessSpec

logger = logging.getLogger(__name__)

MAX_STATES = 2048
MASS_TOLERANCE = 1e-12
DEFAULT_T_MAX = 100_000


@dataclass(frozen=True, eq=False)
class ChainModel:
    """Transient-state chain; ``reset_kernel`` is a stochastic matrix or a fixed distribution."""

    Q: np.ndarray
    p0: np.ndarray
    reset_kernel: np.ndarray | None = None

    def __post_init__(self) -> None:
        Q = np.array(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
            raise InvalidDataError("Q must be a non-empty square matrix")
        d = Q.shape[0]
        if d > MAX_STATES:
            raise InvalidDataError(f"chain has {d} states; at most {MAX_STATES} are supported")
        if np.any(Q < 0) or np.any(Q.sum(axis=1) > 1 + 1e-12):
            raise InvalidDataError("Q entries must be >= 0 with row sums <= 1")
        p0 = np.array(self.p0, dtype=float)
        if p0.shape != (d,) or np.any(p0 < 0) or not math.isclose(p0.sum(), 1.0, abs_tol=1e-12):
            raise InvalidDataError("p0 must be a probability vector over the transient states")
        for arr in (Q, p0):
            arr.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "p0", p0)
        if self.reset_kernel is not None:
            K = np.array(self.reset_kernel, dtype=float)
            if K.shape == (d,):
                ok = np.all(K >= 0) and math.isclose(K.sum(), 1.0, abs_tol=1e-12)
            elif K.shape == (d, d):
                ok = np.all(K >= 0) and np.allclose(K.sum(axis=1), 1.0, atol=1e-12)
            else:
                ok = False
            if not ok:
                raise InvalidDataError("reset_kernel must be a stochastic d x d matrix or a distribution over d states")
            K.setflags(write=False)
            object.__setattr__(self, "reset_kernel", K)

    @property
    def d(self) -> int:
        return int(self.Q.shape[0])

    def with_full_sr(self) -> ChainModel:
        return replace(self, reset_kernel=self.p0)

    def reset(self, mass: np.ndarray) -> np.ndarray:
        """Apply one perturbation to an (unnormalized) transient distribution."""
        K = self._kernel()
        if K.ndim == 1:
            return mass.sum() * K
        return K.T @ mass

    def _kernel(self) -> np.ndarray:
        if self.reset_kernel is None:
            raise InvalidDataError("this operation needs a reset_kernel")
        return self.reset_kernel


def spectral_radius(Q: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(Q, dtype=float)))))


def _require_absorbing(model: ChainModel) -> None:
    rho = spectral_radius(model.Q)
    if rho >= 1.0 - MASS_TOLERANCE:
        raise NonAbsorbingError(f"spectral radius of Q is {rho:.12g}; absorption is not certain")


def exact_survival(model: ChainModel, t_max: int) -> SurvivalCurve:
    if t_max < 1:
        raise InvalidDataError(f"t_max must be positive, got {t_max}")
    _require_absorbing(model)
    psi = np.empty(t_max + 1)
    p = model.p0.copy()
    QT = model.Q.T
    for t in range(t_max + 1):
        psi[t] = p.sum()
        p = QT @ p
    psi[0] = 1.0
    return SurvivalCurve.from_exact(psi)


def _mean_times(model: ChainModel) -> np.ndarray:
    """Per-state expected absorption time m solving (I - Q) m = 1."""
    _require_absorbing(model)
    try:
        return np.linalg.solve(np.eye(model.d) - model.Q, np.ones(model.d))
    except np.linalg.LinAlgError as exc:
        raise NonAbsorbingError("I - Q is singular") from exc


def exact_mean_fpt(model: ChainModel) -> float:
    return float(model.p0 @ _mean_times(model))


def _mass_after(model: ChainModel, P: int) -> np.ndarray:
    return np.linalg.matrix_power(model.Q.T, P) @ model.p0


def exact_residual(model: ChainModel, P: int) -> float:
    """Mean time to absorption after a single perturbation at P, over survivors at P."""
    if P < 1:
        raise InvalidDataError(f"P must be positive, got {P}")
    model._kernel()
    m = _mean_times(model)
    mass = _mass_after(model, P)
    psi_P = mass.sum()
    if psi_P <= 0:
        raise EmptyConditionalError(f"survival at P={P} is zero; no state to perturb")
    return float(model.reset(mass / psi_P) @ m)


def _period_operator(model: ChainModel, P: int) -> np.ndarray:
    QPT = np.linalg.matrix_power(model.Q.T, P)
    K = model._kernel()
    if K.ndim == 1:
        return np.outer(K, np.ones(model.d)) @ QPT
    return K.T @ QPT


def _contraction(M: np.ndarray, max_doublings: int = 60) -> tuple[int, float]:
    """Smallest power j = 2^k with max column sum c of M^j below one."""
    power, j = M, 1
    for _ in range(max_doublings):
        c = float(power.sum(axis=0).max())
        if c < 1.0:
            return j, c
        power = power @ power
        j *= 2
    return j, 1.0


def exact_perturbed_mfpt(model: ChainModel, P: int, t_max: int = DEFAULT_T_MAX) -> float:
    """E[T_P] with the reset kernel applied to the surviving mass at every multiple of P."""
    if P < 1:
        raise InvalidDataError(f"P must be positive, got {P}")
    M = _period_operator(model, P)
    rho = spectral_radius(M)
    if rho >= 1.0 - MASS_TOLERANCE:
        raise NonAbsorbingError(
            f"mass is never absorbed when perturbing every {P} epochs (period spectral radius {rho:.12g})"
        )
    # w[i]: expected epochs survived within one period starting from state i
    w = np.zeros(model.d)
    v = np.ones(model.d)
    for _ in range(P):
        w += v
        v = model.Q @ v
    j, c = _contraction(M)

    p = model.p0.copy()
    total = 0.0
    epochs = 0
    while True:
        total += float(w @ p)
        p = M @ p
        epochs += P
        mass = float(p.sum())
        if mass < MASS_TOLERANCE:
            break
        if epochs >= t_max:
            bound = math.inf if c >= 1.0 else P * mass * j / (1.0 - c)
            raise TruncationError(f"E[T_P] not converged within {t_max} epochs for P={P}", bound)
    tail = float(w @ np.linalg.solve(np.eye(model.d) - M, p)) if mass > 0 else 0.0
    logger.debug("P=%d: propagated %d epochs, residual mass %.3e, tail %.3e", P, epochs, mass, tail)
    return total + tail


def quasi_stationary_distribution(
    model: ChainModel, tol: float = 1e-12, max_iter: int = 100_000
) -> np.ndarray:
    """Limit of the survivor-conditioned distribution, by power iteration from p0."""
    QT = model.Q.T
    v = model.p0.copy()
    diff = math.inf
    for _ in range(max_iter):
        nxt = QT @ v
        mass = nxt.sum()
        if mass <= 0:
            raise EmptyConditionalError("the chain is absorbed surely in finite time; no quasi-stationary law")
        nxt /= mass
        diff = float(np.abs(nxt - v).sum())
        v = nxt
        if diff < tol:
            return v
    raise TruncationError("quasi-stationary iteration did not converge", diff)


def _chain_from_mapping(data: Any) -> ChainModel:
    if not isinstance(data, dict) or "Q" not in data or "p0" not in data:
        raise InvalidDataError('chain file must be a JSON object with "Q" and "p0"')
    return ChainModel(Q=np.asarray(data["Q"]), p0=np.asarray(data["p0"]), reset_kernel=data.get("reset_kernel"))


def load_chain(path: Path | str) -> ChainModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RuntimeIOError(f"cannot read chain file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidDataError(f"{path} is not valid JSON: {exc}") from exc
    return _chain_from_mapping(data)


def chain_from_process(spec: ProcessSpec, perturbation: PerturbationSpec | None = None) -> ChainModel:
    """Oracle model of a Markov-chain process; only full resetting has an exact kernel here."""
    if spec.kind is not ProcessKind.MARKOV_CHAIN:
        raise InvalidDataError(f"no exact oracle for {spec.kind.value}")
    params: MarkovChainParams = spec.params  # type: ignore[assignment]
    model = ChainModel(Q=params.Q, p0=params.p0)
    if perturbation is None:
        return model
    if perturbation.kind is not PerturbationKind.FULL_SR:
        raise IncompatiblePerturbationError(f"{perturbation.label} has no kernel on a Markov chain")
    return model.with_full_sr()

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Mapping

import numpy as np

from .errors import IncompatiblePerturbationError, InvalidDataError

logger = logging.getLogger(__name__)

DEFAULT_SHRINK = 0.4
DEFAULT_PERTURB = 0.1
DEFAULT_FRACTION = 0.3
FLOOR_TOLERANCE = 1e-9


class PerturbationKind(str, Enum):
    FULL_SR = "full_sr"
    SHRINK_PERTURB = "shrink_perturb"
    PARTIAL_SR = "partial_sr"


@dataclass(frozen=True, eq=False)
class StateVector:
    """Process state; ``params`` is None for states without a real parameter vector."""

    params: np.ndarray | None = None
    aux: Any = None

    def __post_init__(self) -> None:
        if self.params is not None:
            params = np.array(self.params, dtype=float)
            if params.ndim != 1 or not np.all(np.isfinite(params)):
                raise InvalidDataError("state params must be a finite 1-D vector")
            params.setflags(write=False)
            object.__setattr__(self, "params", params)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    lam: float | None = None
    gamma: float | None = None
    fraction: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if self.kind is PerturbationKind.SHRINK_PERTURB:
            if self.lam is None or self.gamma is None or self.fraction is not None:
                raise InvalidDataError("shrink_perturb takes exactly lambda and gamma")
            if not (math.isfinite(self.lam) and math.isfinite(self.gamma)) or self.lam < 0 or self.gamma < 0:
                raise InvalidDataError(f"lambda and gamma must be finite and >= 0, got {self.lam}, {self.gamma}")
        elif self.kind is PerturbationKind.PARTIAL_SR:
            if self.fraction is None or self.lam is not None or self.gamma is not None:
                raise InvalidDataError("partial_sr takes exactly fraction")
            if not 0.0 < self.fraction < 1.0:
                raise InvalidDataError(f"fraction must lie in (0, 1), got {self.fraction}")
        elif any(v is not None for v in (self.lam, self.gamma, self.fraction)):
            raise InvalidDataError("full_sr takes no parameters")

    @classmethod
    def full_sr(cls) -> PerturbationSpec:
        return cls(PerturbationKind.FULL_SR)

    @classmethod
    def shrink_perturb(cls, lam: float = DEFAULT_SHRINK, gamma: float = DEFAULT_PERTURB) -> PerturbationSpec:
        return cls(PerturbationKind.SHRINK_PERTURB, lam=float(lam), gamma=float(gamma))

    @classmethod
    def partial_sr(cls, fraction: float = DEFAULT_FRACTION) -> PerturbationSpec:
        return cls(PerturbationKind.PARTIAL_SR, fraction=float(fraction))

    @property
    def needs_parameter_vector(self) -> bool:
        return self.kind is not PerturbationKind.FULL_SR

    @property
    def label(self) -> str:
        if self.kind is PerturbationKind.SHRINK_PERTURB:
            return f"shrink_perturb(lambda={self.lam:g},gamma={self.gamma:g})"
        if self.kind is PerturbationKind.PARTIAL_SR:
            return f"partial_sr(fraction={self.fraction:g})"
        return "full_sr"

    def to_mapping(self) -> dict[str, Any]:
        data: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is PerturbationKind.SHRINK_PERTURB:
            data.update({"lambda": self.lam, "gamma": self.gamma})
        elif self.kind is PerturbationKind.PARTIAL_SR:
            data["fraction"] = self.fraction
        return data

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> PerturbationSpec:
        try:
            kind = PerturbationKind(data["kind"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidDataError(f"unknown perturbation {dict(data)!r}") from exc
        unknown = set(data) - {"kind", "lambda", "gamma", "fraction", "name"}
        if unknown:
            raise InvalidDataError(f"unknown perturbation fields: {sorted(unknown)}")
        try:
            if kind is PerturbationKind.SHRINK_PERTURB:
                return cls.shrink_perturb(data.get("lambda", DEFAULT_SHRINK), data.get("gamma", DEFAULT_PERTURB))
            if kind is PerturbationKind.PARTIAL_SR:
                return cls.partial_sr(data.get("fraction", DEFAULT_FRACTION))
        except InvalidDataError:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidDataError(f"invalid {kind.value} parameters: {exc}") from exc
        return cls(kind, lam=data.get("lambda"), gamma=data.get("gamma"), fraction=data.get("fraction"))


InitSampler = Callable[[np.random.Generator], StateVector]


def reset_count(fraction: float, d: int) -> int:
    """floor(fraction * d), tolerant of products that land a rounding error below an integer."""
    return math.floor(fraction * d + FLOOR_TOLERANCE)


def smallest_magnitude_indices(params: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest |params|; a stable sort breaks ties by lower index."""
    return np.argsort(np.abs(params), kind="stable")[:k]


def apply(
    spec: PerturbationSpec,
    state: StateVector,
    init_sampler: InitSampler,
    rng: np.random.Generator,
) -> StateVector:
    if spec.kind is PerturbationKind.FULL_SR:
        return init_sampler(rng)

    if state.params is None:
        raise IncompatiblePerturbationError(f"{spec.label} needs a real parameter vector")
    fresh = init_sampler(rng).params
    if fresh is None or fresh.shape != state.params.shape:
        raise IncompatiblePerturbationError("initial-condition sampler returned an incompatible state")

    if spec.kind is PerturbationKind.SHRINK_PERTURB:
        return StateVector(params=spec.lam * state.params + spec.gamma * fresh, aux=state.aux)

    d = state.params.size
    k = reset_count(spec.fraction, d)
    if k == 0:
        logger.debug("partial_sr with fraction %g on %d parameters resets nothing", spec.fraction, d)
    params = state.params.copy()
    idx = smallest_magnitude_indices(params, k)
    params[idx] = fresh[idx]
    return StateVector(params=params, aux=state.aux)

"""Trajectory ensembles under the unperturbed, every-P and once-at-P* protocols.

Every trajectory draws from three counter-based substreams keyed on
(master_seed, trajectory id, phase): initial condition, epoch dynamics and
perturbation draws. Protocols that only add perturbations therefore leave the
dynamics noise of a trajectory untouched, which is what pairs perturbed and
unperturbed runs.
"""
from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .core import Ensemble, Trajectory
from .errors import (
    CensoredBaselineError,
    EmptyConditionalError,
    IncompatiblePerturbationError,
    InvalidDataError,
    OutOfHorizonError,
)
from .perturb import PerturbationSpec, StateVector, apply
from .processes import Process, ProcessSpec, build_process

logger = logging.getLogger(__name__)

INIT, DYNAMICS, PERTURB = 0, 1, 2

T = TypeVar("T")


class ProtocolMode(str, Enum):
    UNPERTURBED = "unperturbed"
    EVERY_P = "every_p"
    ONCE_AT_P_STAR = "once_at_p_star"


@dataclass(frozen=True)
class Protocol:
    mode: ProtocolMode = ProtocolMode.UNPERTURBED
    P: int | None = None
    p_star: int | None = None
    perturbation: PerturbationSpec | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ProtocolMode(self.mode))
        if self.mode is ProtocolMode.UNPERTURBED:
            if any(v is not None for v in (self.P, self.p_star, self.perturbation)):
                raise InvalidDataError("unperturbed protocol takes no P, p_star or perturbation")
            return
        if self.perturbation is None:
            raise InvalidDataError(f"{self.mode.value} protocol needs a perturbation")
        if self.mode is ProtocolMode.EVERY_P:
            if self.P is None or self.P < 1 or self.p_star is not None:
                raise InvalidDataError("every_p protocol takes a positive P and no p_star")
        elif self.p_star is None or self.p_star < 1 or self.P is not None:
            raise InvalidDataError("once_at_p_star protocol takes a positive p_star and no P")

    @classmethod
    def unperturbed(cls) -> Protocol:
        return cls()

    @classmethod
    def every_p(cls, P: int, perturbation: PerturbationSpec) -> Protocol:
        return cls(ProtocolMode.EVERY_P, P=int(P), perturbation=perturbation)

    @classmethod
    def once_at(cls, p_star: int, perturbation: PerturbationSpec) -> Protocol:
        return cls(ProtocolMode.ONCE_AT_P_STAR, p_star=int(p_star), perturbation=perturbation)

    def perturbs_at(self, t: int) -> bool:
        if self.mode is ProtocolMode.EVERY_P:
            return t % self.P == 0  # type: ignore[operator]
        if self.mode is ProtocolMode.ONCE_AT_P_STAR:
            return t == self.p_star
        return False

    def to_mapping(self) -> dict[str, Any]:
        data: dict[str, Any] = {"mode": self.mode.value}
        if self.P is not None:
            data["P"] = self.P
        if self.p_star is not None:
            data["p_star"] = self.p_star
        if self.perturbation is not None:
            data["perturbation"] = self.perturbation.to_mapping()
        return data

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> Protocol:
        if not data:
            return cls()
        try:
            mode = ProtocolMode(data.get("mode", ProtocolMode.UNPERTURBED))
        except ValueError as exc:
            raise InvalidDataError(f"unknown protocol mode {data.get('mode')!r}") from exc
        pert = data.get("perturbation")
        if pert is not None and not isinstance(pert, Mapping):
            raise InvalidDataError(f"protocol.perturbation must be a mapping, got {pert!r}")
        for key in ("P", "p_star"):
            value = data.get(key)
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise InvalidDataError(f"protocol.{key} must be an integer, got {value!r}")
        return cls(
            mode=mode,
            P=data.get("P"),
            p_star=data.get("p_star"),
            perturbation=PerturbationSpec.from_mapping(pert) if pert is not None else None,
        )


def substream(master_seed: int, traj_id: int, phase: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(traj_id, phase))
    return np.random.Generator(np.random.Philox(seq))


def trajectory_seed(master_seed: int, traj_id: int) -> int:
    """Stable 64-bit label of a trajectory's substream family, recorded alongside it."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(traj_id,))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def check_compatible(process: Process, perturbation: PerturbationSpec | None) -> None:
    if perturbation is not None and perturbation.needs_parameter_vector and not process.has_parameter_vector:
        raise IncompatiblePerturbationError(
            f"{perturbation.label} needs a real parameter vector; {process.spec.kind.value} has none"
        )


def _check_run(n: int, master_seed: int, threads: int) -> None:
    if n < 1:
        raise InvalidDataError(f"number of trajectories must be positive, got {n}")
    if master_seed < 0:
        raise InvalidDataError(f"master seed must be a non-negative integer, got {master_seed}")
    if threads < 1:
        raise InvalidDataError(f"threads must be positive, got {threads}")


def _ordered_map(fn: Callable[[int], T], ids: Iterable[int], threads: int) -> list[T]:
    if threads == 1:
        return [fn(i) for i in ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, ids))


class _TrajectoryRunner:
    def __init__(self, process: Process, traj_id: int, master_seed: int) -> None:
        self.process = process
        self.init_rng = substream(master_seed, traj_id, INIT)
        self.dyn_rng = substream(master_seed, traj_id, DYNAMICS)
        self.pert_rng = substream(master_seed, traj_id, PERTURB)
        self.state: StateVector = process.initial_state(self.init_rng)
        self.values: list[float] = [process.observe(self.state)]
        self.t = 0

    def step(self) -> bool:
        """Advance one epoch; True when the new value satisfies the target."""
        self.state = self.process.advance(self.state, self.dyn_rng)
        self.t += 1
        a = self.process.observe(self.state)
        self.values.append(a)
        return self.process.spec.target.reached(a)

    def perturb(self, spec: PerturbationSpec) -> None:
        self.state = apply(spec, self.state, self.process.initial_state, self.pert_rng)

    def fork(self) -> _TrajectoryRunner:
        twin = copy.copy(self)
        twin.dyn_rng = copy.deepcopy(self.dyn_rng)
        twin.pert_rng = copy.deepcopy(self.pert_rng)
        twin.values = list(self.values)
        return twin


def run_trajectory(process: Process, protocol: Protocol, traj_id: int, master_seed: int) -> Trajectory:
    runner = _TrajectoryRunner(process, traj_id, master_seed)
    horizon = process.spec.horizon
    seed = trajectory_seed(master_seed, traj_id)
    while runner.t < horizon:
        if runner.step():
            return Trajectory(id=traj_id, seed=seed, values=tuple(runner.values), fpt=runner.t)
        # a trajectory absorbed at a multiple of P is never perturbed
        if runner.t < horizon and protocol.perturbs_at(runner.t):
            runner.perturb(protocol.perturbation)  # type: ignore[arg-type]
    return Trajectory(id=traj_id, seed=seed, values=tuple(runner.values), censored_at=horizon)


def simulate_ensemble(
    process: ProcessSpec,
    protocol: Protocol,
    n: int,
    master_seed: int,
    threads: int = 1,
) -> Ensemble:
    _check_run(n, master_seed, threads)
    runtime = build_process(process)
    check_compatible(runtime, protocol.perturbation)
    trajectories = _ordered_map(
        lambda i: run_trajectory(runtime, protocol, i, master_seed), range(n), threads
    )
    ensemble = Ensemble(
        trajectories=tuple(trajectories),
        target=process.target,
        horizon=process.horizon,
        process_fingerprint=process.fingerprint(),
        master_seed=master_seed,
    )
    n_absorbed = sum(t.absorbed for t in trajectories)
    logger.info(
        "simulated %d %s trajectories (%s): %d absorbed, %d censored",
        n,
        process.kind.value,
        protocol.mode.value,
        n_absorbed,
        n - n_absorbed,
    )
    return ensemble


@dataclass(frozen=True)
class ResidualSample:
    """Epochs from a single perturbation at ``p_star`` to absorption, over the survivors at ``p_star``.

    ``paths`` (when kept) holds, per survivor in ``survivor_ids`` order, the collective
    variable from the epoch just before the perturbation to absorption or the residual
    horizon.
    """

    p_star: int
    residuals: tuple[int, ...]
    n_censored: int
    n_survivors_at_pstar: int
    residual_horizon: int | None = None
    survivor_ids: tuple[int, ...] = ()
    censored_ids: tuple[int, ...] = ()
    paths: tuple[np.ndarray, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "residuals", tuple(int(r) for r in self.residuals))
        if self.p_star < 1:
            raise InvalidDataError("p_star must be positive")
        if self.n_survivors_at_pstar < 1:
            raise InvalidDataError("a residual sample needs at least one survivor")
        if self.n_censored < 0 or len(self.residuals) + self.n_censored != self.n_survivors_at_pstar:
            raise InvalidDataError("residuals plus censored must equal the survivor count")
        if any(r < 1 for r in self.residuals):
            raise InvalidDataError("residual times must be positive")
        if self.residual_horizon is not None and any(r > self.residual_horizon for r in self.residuals):
            raise InvalidDataError("residual beyond the residual horizon")

    @property
    def n(self) -> int:
        return len(self.residuals)

    def absorbed_flags(self) -> list[bool]:
        censored = set(self.censored_ids)
        return [i not in censored for i in self.survivor_ids]


def mean_residual(sample: ResidualSample, allow_censored: bool = False) -> float:
    """Arithmetic mean of the residual times.

    With ``allow_censored`` a censored survivor counts as ``residual_horizon`` and the
    result is only a lower bound.
    """
    values = list(sample.residuals)
    if sample.n_censored:
        if not allow_censored:
            raise CensoredBaselineError(sample.n_censored, what="mean residual time")
        if sample.residual_horizon is None:
            raise InvalidDataError("censored residuals need a residual horizon to be counted")
        logger.warning(
            "%d censored residuals counted as %d; the mean is a lower bound",
            sample.n_censored,
            sample.residual_horizon,
        )
        values += [sample.residual_horizon] * sample.n_censored
    if not values:
        raise InvalidDataError("empty residual sample")
    return math.fsum(values) / len(values)


def residual_stderr(sample: ResidualSample) -> float:
    """Standard error std(ddof=1)/sqrt(n) of the uncensored residuals; NaN below two values."""
    if sample.n < 2:
        return float("nan")
    arr = np.asarray(sample.residuals, dtype=float)
    return float(arr.std(ddof=1) / math.sqrt(arr.size))


def _continue_after(
    runner: _TrajectoryRunner, spec: PerturbationSpec, residual_horizon: int, keep_path: bool
) -> tuple[int | None, np.ndarray | None]:
    start = len(runner.values) - 1
    runner.perturb(spec)
    residual = None
    for s in range(1, residual_horizon + 1):
        if runner.step():
            residual = s
            break
    return residual, np.asarray(runner.values[start:], dtype=float) if keep_path else None


def measure_residuals_many(
    process: ProcessSpec,
    candidates: Mapping[str, PerturbationSpec],
    p_star: int,
    n: int,
    master_seed: int,
    residual_horizon: int,
    threads: int = 1,
    keep_paths: bool = False,
) -> dict[str, ResidualSample]:
    """Residual samples for several perturbations on one shared survivor set.

    Every candidate starts from the same survivor states and consumes the same
    perturbation and dynamics draws, so the comparison between candidates is paired.
    """
    _check_run(n, master_seed, threads)
    if not candidates:
        raise InvalidDataError("no candidate perturbations")
    if p_star < 1 or p_star > process.horizon:
        raise OutOfHorizonError(p_star, process.horizon)
    if residual_horizon < 1:
        raise InvalidDataError(f"residual horizon must be positive, got {residual_horizon}")
    runtime = build_process(process)
    for spec in candidates.values():
        check_compatible(runtime, spec)
    names = list(candidates)

    def one(traj_id: int) -> dict[str, tuple[int | None, np.ndarray | None]] | None:
        runner = _TrajectoryRunner(runtime, traj_id, master_seed)
        while runner.t < p_star:
            if runner.step():
                return None
        return {
            name: _continue_after(runner.fork(), candidates[name], residual_horizon, keep_paths) for name in names
        }

    outcomes = _ordered_map(one, range(n), threads)
    survivors = [i for i, out in enumerate(outcomes) if out is not None]
    if not survivors:
        raise EmptyConditionalError(f"no trajectory survived to p_star={p_star}")

    samples: dict[str, ResidualSample] = {}
    for name in names:
        per = [(i, outcomes[i][name]) for i in survivors]  # type: ignore[index]
        residuals = tuple(r for _, (r, _) in per if r is not None)
        censored = tuple(i for i, (r, _) in per if r is None)
        samples[name] = ResidualSample(
            p_star=p_star,
            residuals=residuals,
            n_censored=len(censored),
            n_survivors_at_pstar=len(survivors),
            residual_horizon=residual_horizon,
            survivor_ids=tuple(survivors),
            censored_ids=censored,
            paths=tuple(path for _, (_, path) in per if path is not None) if keep_paths else None,
        )
        logger.info(
            "%s at p_star=%d: %d survivors, %d absorbed, %d censored",
            name,
            p_star,
            len(survivors),
            len(residuals),
            len(censored),
        )
    return samples


def measure_residuals(
    process: ProcessSpec,
    perturbation: PerturbationSpec,
    p_star: int,
    n: int,
    master_seed: int,
    residual_horizon: int,
    threads: int = 1,
    keep_paths: bool = False,
) -> ResidualSample:
    samples = measure_residuals_many(
        process,
        {perturbation.label: perturbation},
        p_star,
        n,
        master_seed,
        residual_horizon,
        threads=threads,
        keep_paths=keep_paths,
    )
    return samples[perturbation.label]


def tau_sweep(
    process: ProcessSpec,
    perturbation: PerturbationSpec,
    P_values: Sequence[int],
    n: int,
    master_seed: int,
    residual_horizon: int,
    threads: int = 1,
) -> list[ResidualSample]:
    """Residual samples at several perturbation epochs; tau_bar as a function of P."""
    if not P_values:
        raise InvalidDataError("tau sweep needs at least one P")
    return [
        measure_residuals(process, perturbation, int(P), n, master_seed, residual_horizon, threads)
        for P in P_values
    ]


def sweep_regime(sample: ResidualSample) -> str:
    """'frequent' when P < tau_bar (perturbations would stack up), else 'rare'."""
    if sample.n_censored:
        return "censored"
    return "frequent" if sample.p_star < mean_residual(sample) else "rare"

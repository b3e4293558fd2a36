"""Desk-scale stochastic processes standing in for network training.

Each process exposes the same epoch-level interface: draw an initial state, advance
one epoch, and read the collective variable. Every ``advance`` consumes a fixed
number of draws from its rng regardless of the state, so two runs sharing a dynamics
stream stay paired until a perturbation changes the state.
"""
from __future__ import annotations

import hashlib
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from .core import Direction, Target
from .errors import InvalidDataError
from .perturb import StateVector


class ProcessKind(str, Enum):
    MARKOV_CHAIN = "markov_chain"
    DOUBLE_WELL = "double_well"
    TOY_SGD = "toy_sgd"


class Optimizer(str, Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


@dataclass(frozen=True, eq=False)
class MarkovChainParams:
    """Substochastic one-epoch transitions; the row deficit is the absorption probability."""

    Q: np.ndarray
    p0: np.ndarray
    values: np.ndarray | None = None
    absorbed_value: float = 1.0

    def __post_init__(self) -> None:
        Q = np.array(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
            raise InvalidDataError("Q must be a non-empty square matrix")
        d = Q.shape[0]
        if np.any(Q < 0) or np.any(Q.sum(axis=1) > 1 + 1e-12):
            raise InvalidDataError("Q entries must be >= 0 with row sums <= 1")
        p0 = np.array(self.p0, dtype=float)
        if p0.shape != (d,) or np.any(p0 < 0) or not math.isclose(p0.sum(), 1.0, abs_tol=1e-12):
            raise InvalidDataError("p0 must be a probability vector over the transient states")
        values = np.zeros(d) if self.values is None else np.array(self.values, dtype=float)
        if values.shape != (d,) or not np.all(np.isfinite(values)):
            raise InvalidDataError("values must give one finite collective-variable value per state")
        for arr in (Q, p0, values):
            arr.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "absorbed_value", float(self.absorbed_value))

    def to_mapping(self) -> dict[str, Any]:
        return {
            "Q": self.Q.tolist(),
            "p0": self.p0.tolist(),
            "values": self.values.tolist(),  # type: ignore[union-attr]
            "absorbed_value": self.absorbed_value,
        }


@dataclass(frozen=True)
class DoubleWellParams:
    """Overdamped Langevin dynamics in U(x) = a (x^2 - 1)^2 - c x."""

    barrier: float = 1.0
    step_size: float = 0.01
    beta: float = 3.0
    inner_steps: int = 20
    start_mean: float = -1.0
    start_std: float = 0.05
    tilt: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.barrier) and self.barrier >= 0):
            raise InvalidDataError("barrier must be finite and >= 0")
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise InvalidDataError("step_size must be finite and positive")
        # beta = inf is the noise-free limit
        if not self.beta > 0:
            raise InvalidDataError("beta must be positive")
        if self.inner_steps < 1:
            raise InvalidDataError("inner_steps must be >= 1")
        if not (math.isfinite(self.start_std) and self.start_std >= 0):
            raise InvalidDataError("start_std must be finite and >= 0")
        if not (math.isfinite(self.start_mean) and math.isfinite(self.tilt)):
            raise InvalidDataError("start_mean and tilt must be finite")

    def to_mapping(self) -> dict[str, Any]:
        return {
            "barrier": self.barrier,
            "step_size": self.step_size,
            "beta": self.beta,
            "inner_steps": self.inner_steps,
            "start_mean": self.start_mean,
            "start_std": self.start_std,
            "tilt": self.tilt,
        }


@dataclass(frozen=True)
class ToySgdParams:
    """Minibatch training of a small tanh MLP on data from a fixed random teacher network."""

    layers: tuple[int, ...] = (2, 8, 1)
    n_samples: int = 64
    teacher_seed: int = 0
    learning_rate: float = 0.005
    batch_size: int = 8
    init_scale: float = 0.5
    inner_steps: int = 10
    optimizer: Optimizer = Optimizer.SGD
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(int(n) for n in self.layers))
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if len(self.layers) < 2 or any(n < 1 for n in self.layers) or self.layers[-1] != 1:
            raise InvalidDataError("layers must list positive widths ending in a single output")
        if self.n_samples < 2 or self.batch_size < 1 or self.inner_steps < 1:
            raise InvalidDataError("n_samples >= 2, batch_size >= 1 and inner_steps >= 1 are required")
        for name in ("learning_rate", "init_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidDataError(f"{name} must be finite and positive")
        if not 0 <= self.momentum < 1 or not all(0 <= b < 1 for b in self.adam_betas):
            raise InvalidDataError("momentum and adam betas must lie in [0, 1)")

    def to_mapping(self) -> dict[str, Any]:
        return {
            "layers": list(self.layers),
            "n_samples": self.n_samples,
            "teacher_seed": self.teacher_seed,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "init_scale": self.init_scale,
            "inner_steps": self.inner_steps,
            "optimizer": self.optimizer.value,
            "momentum": self.momentum,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
        }


ProcessParams = Union[MarkovChainParams, DoubleWellParams, ToySgdParams]

_PARAM_TYPES: dict[ProcessKind, type] = {
    ProcessKind.MARKOV_CHAIN: MarkovChainParams,
    ProcessKind.DOUBLE_WELL: DoubleWellParams,
    ProcessKind.TOY_SGD: ToySgdParams,
}

DEFAULT_HORIZONS = {
    ProcessKind.MARKOV_CHAIN: 100,
    ProcessKind.DOUBLE_WELL: 1500,
    ProcessKind.TOY_SGD: 600,
}

DEFAULT_TARGETS = {
    ProcessKind.MARKOV_CHAIN: Target(1.0, Direction.AT_LEAST),
    ProcessKind.DOUBLE_WELL: Target(0.8, Direction.AT_LEAST),
    ProcessKind.TOY_SGD: Target(0.05, Direction.AT_MOST),
}


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class ProcessSpec:
    kind: ProcessKind
    params: ProcessParams
    horizon: int
    target: Target = field(default_factory=lambda: Target(1.0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ProcessKind(self.kind))
        if not isinstance(self.params, _PARAM_TYPES[self.kind]):
            raise InvalidDataError(f"{self.kind.value} needs {_PARAM_TYPES[self.kind].__name__}")
        if self.horizon < 1:
            raise InvalidDataError("horizon must be positive")

    def to_mapping(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "horizon": self.horizon,
            "target": self.target.to_mapping(),
            "params": self.params.to_mapping(),
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(canonical_json(self.to_mapping()).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> ProcessSpec:
        if not isinstance(data, Mapping):
            raise InvalidDataError(f"process must be a mapping, got {data!r}")
        try:
            kind = ProcessKind(data["kind"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidDataError(f"process.kind must be one of {[k.value for k in ProcessKind]}") from exc
        params_data = data.get("params") or {}
        if not isinstance(params_data, Mapping):
            raise InvalidDataError(f"process.params must be a mapping, got {params_data!r}")
        raw = dict(params_data)
        if kind is ProcessKind.MARKOV_CHAIN and "chain_file" in data:
            raw = {**_read_chain_file(Path(data["chain_file"]), base_dir), **raw}
        try:
            params = _PARAM_TYPES[kind](**raw)
        except InvalidDataError:
            raise
        except (TypeError, ValueError) as exc:
            raise InvalidDataError(f"invalid {kind.value} params: {exc}") from exc
        target = Target.from_mapping(data["target"]) if "target" in data else DEFAULT_TARGETS[kind]
        horizon = data.get("horizon", DEFAULT_HORIZONS[kind])
        if not isinstance(horizon, int) or isinstance(horizon, bool):
            raise InvalidDataError(f"process.horizon must be an integer, got {horizon!r}")
        return cls(kind=kind, params=params, horizon=horizon, target=target)


def _read_chain_file(path: Path, base_dir: Path | None) -> dict[str, Any]:
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidDataError(f"cannot read chain file {path}: {exc}") from exc
    return {k: data[k] for k in ("Q", "p0", "values", "absorbed_value") if k in data}


class Process(ABC):
    """Epoch-level dynamics of one process kind."""

    has_parameter_vector = True

    def __init__(self, spec: ProcessSpec) -> None:
        self.spec = spec

    @abstractmethod
    def initial_state(self, rng: np.random.Generator) -> StateVector: ...

    @abstractmethod
    def advance(self, state: StateVector, rng: np.random.Generator) -> StateVector: ...

    @abstractmethod
    def observe(self, state: StateVector) -> float: ...


class MarkovChainProcess(Process):
    has_parameter_vector = False

    def __init__(self, spec: ProcessSpec) -> None:
        super().__init__(spec)
        params: MarkovChainParams = spec.params  # type: ignore[assignment]
        self.d = params.Q.shape[0]
        self._row_cdf = np.cumsum(params.Q, axis=1)
        self._p0_cdf = np.cumsum(params.p0)
        self._values = params.values
        self._absorbed_value = params.absorbed_value
        if np.any(spec.target.reached_mask(params.values)):  # type: ignore[arg-type]
            raise InvalidDataError("a transient state's collective-variable value already satisfies the target")
        if not spec.target.reached(params.absorbed_value):
            raise InvalidDataError("absorbed_value must satisfy the target")

    def initial_state(self, rng: np.random.Generator) -> StateVector:
        u = rng.random()
        i = min(int(np.searchsorted(self._p0_cdf, u, side="right")), self.d - 1)
        return StateVector(aux=i)

    def advance(self, state: StateVector, rng: np.random.Generator) -> StateVector:
        u = rng.random()
        i = state.aux
        if i == self.d:
            return state
        j = int(np.searchsorted(self._row_cdf[i], u, side="right"))
        return StateVector(aux=min(j, self.d))

    def observe(self, state: StateVector) -> float:
        if state.aux == self.d:
            return self._absorbed_value
        return float(self._values[state.aux])


class DoubleWellProcess(Process):
    def __init__(self, spec: ProcessSpec) -> None:
        super().__init__(spec)
        p: DoubleWellParams = spec.params  # type: ignore[assignment]
        self.p = p
        self._sigma = 0.0 if math.isinf(p.beta) else math.sqrt(2.0 * p.step_size / p.beta)

    def initial_state(self, rng: np.random.Generator) -> StateVector:
        p = self.p
        x = p.start_mean + p.start_std * rng.standard_normal()
        if p.start_std > 0 and p.start_mean < 0:
            while x >= 0:
                x = p.start_mean + p.start_std * rng.standard_normal()
        return StateVector(params=np.array([x]))

    def advance(self, state: StateVector, rng: np.random.Generator) -> StateVector:
        p = self.p
        x = float(state.params[0])  # type: ignore[index]
        a, c, eta, sigma = p.barrier, p.tilt, p.step_size, self._sigma
        for xi in rng.standard_normal(p.inner_steps).tolist():
            x += eta * (c - 4.0 * a * x * (x * x - 1.0)) + sigma * xi
        return StateVector(params=np.array([x]))

    def observe(self, state: StateVector) -> float:
        return float(state.params[0])  # type: ignore[index]


class ToySgdProcess(Process):
    def __init__(self, spec: ProcessSpec) -> None:
        super().__init__(spec)
        p: ToySgdParams = spec.params  # type: ignore[assignment]
        self.p = p
        self.shapes = [(n_out, n_in) for n_in, n_out in zip(p.layers[:-1], p.layers[1:])]
        self.d = sum(o * i + o for o, i in self.shapes)
        data_rng = np.random.default_rng(p.teacher_seed)
        self.X = data_rng.standard_normal((p.n_samples, p.layers[0]))
        teacher = []
        for n_out, n_in in self.shapes:
            teacher.append(data_rng.standard_normal((n_out, n_in)) / math.sqrt(n_in) * 2.0)
            teacher.append(np.zeros(n_out))
        self.y = self._forward(teacher, self.X)[-1][:, 0]
        self.y_var = float(self.y.var())
        if self.y_var <= 0:
            raise InvalidDataError("teacher network produced constant targets")

    def _unpack(self, theta: np.ndarray) -> list[np.ndarray]:
        out, pos = [], 0
        for n_out, n_in in self.shapes:
            out.append(theta[pos : pos + n_out * n_in].reshape(n_out, n_in))
            pos += n_out * n_in
            out.append(theta[pos : pos + n_out])
            pos += n_out
        return out

    def _forward(self, weights: list[np.ndarray], X: np.ndarray) -> list[np.ndarray]:
        acts = [X]
        n_layers = len(self.shapes)
        for layer in range(n_layers):
            z = acts[-1] @ weights[2 * layer].T + weights[2 * layer + 1]
            acts.append(np.tanh(z) if layer < n_layers - 1 else z)
        return acts

    def loss(self, theta: np.ndarray) -> float:
        pred = self._forward(self._unpack(theta), self.X)[-1][:, 0]
        return float(np.mean((pred - self.y) ** 2) / self.y_var)

    def gradient(self, theta: np.ndarray, batch: np.ndarray) -> np.ndarray:
        weights = self._unpack(theta)
        acts = self._forward(weights, self.X[batch])
        delta = 2.0 * (acts[-1] - self.y[batch, None]) / (batch.size * self.y_var)
        grads: list[np.ndarray] = [np.empty(0)] * len(weights)
        for layer in range(len(self.shapes) - 1, -1, -1):
            grads[2 * layer] = delta.T @ acts[layer]
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer:
                delta = (delta @ weights[2 * layer]) * (1.0 - acts[layer] ** 2)
        return np.concatenate([g.ravel() for g in grads])

    def _fresh_aux(self) -> Any:
        if self.p.optimizer is Optimizer.MOMENTUM:
            return np.zeros(self.d)
        if self.p.optimizer is Optimizer.ADAM:
            return (np.zeros(self.d), np.zeros(self.d), 0)
        return None

    def initial_state(self, rng: np.random.Generator) -> StateVector:
        s = self.p.init_scale
        return StateVector(params=rng.uniform(-s, s, size=self.d), aux=self._fresh_aux())

    def _batches(self, rng: np.random.Generator) -> list[np.ndarray]:
        p = self.p
        if p.batch_size >= p.n_samples:
            return [np.arange(p.n_samples)] * p.inner_steps
        return list(rng.integers(0, p.n_samples, size=(p.inner_steps, p.batch_size)))

    def advance(self, state: StateVector, rng: np.random.Generator) -> StateVector:
        p = self.p
        theta = np.array(state.params, dtype=float)
        aux = state.aux
        for batch in self._batches(rng):
            g = self.gradient(theta, batch)
            if p.optimizer is Optimizer.SGD:
                theta = theta - p.learning_rate * g
            elif p.optimizer is Optimizer.MOMENTUM:
                aux = p.momentum * aux + g
                theta = theta - p.learning_rate * aux
            else:
                m, v, step = aux
                b1, b2 = p.adam_betas
                step += 1
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                m_hat = m / (1 - b1**step)
                v_hat = v / (1 - b2**step)
                theta = theta - p.learning_rate * m_hat / (np.sqrt(v_hat) + p.adam_eps)
                aux = (m, v, step)
        return StateVector(params=theta, aux=aux)

    def observe(self, state: StateVector) -> float:
        return self.loss(state.params)  # type: ignore[arg-type]


_PROCESSES: dict[ProcessKind, type[Process]] = {
    ProcessKind.MARKOV_CHAIN: MarkovChainProcess,
    ProcessKind.DOUBLE_WELL: DoubleWellProcess,
    ProcessKind.TOY_SGD: ToySgdProcess,
}


def build_process(spec: ProcessSpec) -> Process:
    return _PROCESSES[spec.kind](spec)

import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpt_perturb.core import Target, estimate_survival, partial_sum
from fpt_perturb.errors import (
    EmptyConditionalError,
    IncompatiblePerturbationError,
    InvalidDataError,
    NonAbsorbingError,
    RuntimeIOError,
    TruncationError,
)
from fpt_perturb.oracle import (
    ChainModel,
    chain_from_process,
    exact_mean_fpt,
    exact_perturbed_mfpt,
    exact_residual,
    exact_survival,
    load_chain,
    quasi_stationary_distribution,
)
from fpt_perturb.perturb import PerturbationSpec
from fpt_perturb.processes import DoubleWellParams, MarkovChainParams, ProcessKind, ProcessSpec
from fpt_perturb.simulate import Protocol, simulate_ensemble

CHAIN_FILE = Path(__file__).resolve().parents[1] / "data" / "configs" / "chain.json"

MEMORYLESS = ChainModel(Q=[[0.5]], p0=[1.0])
TWO_STATE = ChainModel(Q=[[0.0, 1.0], [0.0, 0.5]], p0=[1.0, 0.0])


def deterministic(T=4):
    return ChainModel(Q=np.eye(T, k=1), p0=np.eye(T)[0])


def random_chain(seed, d):
    """Dense chain whose row sums lie in [0.3, 0.95], so absorption is certain."""
    rng = np.random.default_rng(seed)
    Q = rng.random((d, d))
    Q *= (rng.uniform(0.3, 0.95, size=d) / Q.sum(axis=1))[:, None]
    return ChainModel(Q=Q, p0=rng.dirichlet(np.ones(d)))


def test_exact_survival_examples():
    assert np.allclose(exact_survival(MEMORYLESS, 10).psi, 0.5 ** np.arange(11))
    assert exact_survival(ChainModel(Q=[[0.0]], p0=[1.0]), 3).psi.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert exact_survival(TWO_STATE, 3).psi.tolist() == [1.0, 1.0, 0.5, 0.25]
    with pytest.raises(InvalidDataError):
        exact_survival(MEMORYLESS, 0)


def test_exact_mean_fpt_examples():
    assert math.isclose(exact_mean_fpt(MEMORYLESS), 2.0)
    assert math.isclose(exact_mean_fpt(TWO_STATE), 3.0)
    assert math.isclose(exact_mean_fpt(ChainModel(Q=[[0.0]], p0=[1.0])), 1.0)
    with pytest.raises(NonAbsorbingError):
        exact_mean_fpt(ChainModel(Q=[[1.0]], p0=[1.0]))


def test_exact_residual_examples():
    for P in range(1, 6):
        assert math.isclose(exact_residual(MEMORYLESS.with_full_sr(), P), 2.0)
    to_last = ChainModel(Q=TWO_STATE.Q, p0=TWO_STATE.p0, reset_kernel=[0.0, 1.0])
    assert math.isclose(exact_residual(to_last, 1), 2.0)
    identity = ChainModel(Q=TWO_STATE.Q, p0=TWO_STATE.p0, reset_kernel=np.eye(2))
    # survivors at 1 sit in state 1, whose mean time is 2
    assert math.isclose(exact_residual(identity, 1), 2.0)
    with pytest.raises(InvalidDataError):
        exact_residual(TWO_STATE, 1)
    with pytest.raises(EmptyConditionalError):
        exact_residual(ChainModel(Q=[[0.0]], p0=[1.0]).with_full_sr(), 1)


def test_exact_perturbed_mfpt_examples():
    for P in range(1, 8):
        assert math.isclose(exact_perturbed_mfpt(MEMORYLESS.with_full_sr(), P), 2.0, rel_tol=1e-12)
    with pytest.raises(NonAbsorbingError):
        exact_perturbed_mfpt(deterministic(4).with_full_sr(), 2)
    assert math.isclose(exact_perturbed_mfpt(TWO_STATE.with_full_sr(), 2), 4.0, rel_tol=1e-12)
    # no survivor left to reset: plain E[T]
    assert exact_perturbed_mfpt(deterministic(4).with_full_sr(), 4) == 4.0
    assert exact_perturbed_mfpt(deterministic(4).with_full_sr(), 6) == 4.0
    with pytest.raises(InvalidDataError):
        exact_perturbed_mfpt(TWO_STATE, 2)


def test_slow_convergence_reports_a_tail_bound():
    slow = ChainModel(Q=[[0.999999]], p0=[1.0]).with_full_sr()
    with pytest.raises(TruncationError) as info:
        exact_perturbed_mfpt(slow, 1, t_max=100)
    assert 0 < info.value.bound < math.inf
    assert info.value.exit_code == 5


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 30))
def test_full_reset_matches_survival_ratio(seed, d, P):
    model = random_chain(seed, d).with_full_sr()
    curve = exact_survival(model, P)
    expected = partial_sum(curve, P) / (1.0 - curve.psi[P])
    assert math.isclose(exact_perturbed_mfpt(model, P), expected, rel_tol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 30))
def test_single_perturbation_decomposition(seed, d, P):
    base = random_chain(seed, d)
    # extra state that is absorbed one epoch after any reset lands on it
    Q = np.zeros((d + 1, d + 1))
    Q[:d, :d] = base.Q
    p0 = np.append(base.p0, 0.0)
    kernel = np.eye(d + 1)[d]
    model = ChainModel(Q=Q, p0=p0, reset_kernel=kernel)
    curve = exact_survival(model, P)
    expected = partial_sum(curve, P) + curve.psi[P] * exact_residual(model, P)
    assert math.isclose(exact_perturbed_mfpt(model, P), expected, rel_tol=1e-9)


def test_exact_survival_agrees_with_simulation():
    n = 20_000
    params = MarkovChainParams(Q=TWO_STATE.Q, p0=TWO_STATE.p0)
    spec = ProcessSpec(ProcessKind.MARKOV_CHAIN, params, 30, Target(1.0))
    empirical = estimate_survival(simulate_ensemble(spec, Protocol.unperturbed(), n, master_seed=21)).psi
    exact = exact_survival(TWO_STATE, 30).psi
    sigma = np.sqrt(exact * (1 - exact) / n)
    assert np.all(np.abs(empirical - exact) <= 4 * sigma + 1e-12)


def test_quasi_stationary_distribution():
    assert np.allclose(quasi_stationary_distribution(TWO_STATE), [0.0, 1.0])
    sym = ChainModel(Q=[[0.4, 0.4], [0.4, 0.4]], p0=[1.0, 0.0])
    assert np.allclose(quasi_stationary_distribution(sym), [0.5, 0.5])
    with pytest.raises(EmptyConditionalError):
        quasi_stationary_distribution(deterministic(3))


def test_load_chain(tmp_path):
    model = load_chain(CHAIN_FILE)
    assert model.d == 2
    assert math.isclose(exact_perturbed_mfpt(model, 2), 4.0, rel_tol=1e-12)

    with pytest.raises(RuntimeIOError):
        load_chain(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(InvalidDataError):
        load_chain(bad)
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"Q": [[0.5]]}), encoding="utf-8")
    with pytest.raises(InvalidDataError):
        load_chain(partial)


def test_chain_model_validation():
    with pytest.raises(InvalidDataError):
        ChainModel(Q=[[0.7, 0.7], [0.0, 0.0]], p0=[1.0, 0.0])
    with pytest.raises(InvalidDataError):
        ChainModel(Q=[[0.5]], p0=[0.5])
    with pytest.raises(InvalidDataError):
        ChainModel(Q=[[0.5]], p0=[1.0], reset_kernel=[0.5, 0.5])


def test_chain_from_process():
    params = MarkovChainParams(Q=[[0.5]], p0=[1.0])
    spec = ProcessSpec(ProcessKind.MARKOV_CHAIN, params, 60, Target(1.0))
    model = chain_from_process(spec, PerturbationSpec.full_sr())
    assert model.reset_kernel.tolist() == [1.0]
    assert chain_from_process(spec).reset_kernel is None
    with pytest.raises(IncompatiblePerturbationError):
        chain_from_process(spec, PerturbationSpec.shrink_perturb())
    with pytest.raises(InvalidDataError):
        chain_from_process(ProcessSpec(ProcessKind.DOUBLE_WELL, DoubleWellParams(), 100, Target(0.8)))

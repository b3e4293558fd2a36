import math

import numpy as np
import pytest

from fpt_perturb.core import Target, estimate_survival, fpt_sample, mean_fpt
from fpt_perturb.errors import (
    CensoredBaselineError,
    EmptyConditionalError,
    IncompatiblePerturbationError,
    InvalidDataError,
    OutOfHorizonError,
)
from fpt_perturb.perturb import PerturbationSpec
from fpt_perturb.processes import (
    DoubleWellParams,
    MarkovChainParams,
    ProcessKind,
    ProcessSpec,
    ToySgdParams,
    build_process,
)
from fpt_perturb.simulate import (
    Protocol,
    ResidualSample,
    mean_residual,
    measure_residuals,
    measure_residuals_many,
    residual_stderr,
    simulate_ensemble,
    substream,
    sweep_regime,
    tau_sweep,
)

SR = PerturbationSpec.full_sr()
SNP = PerturbationSpec.shrink_perturb(0.4, 0.1)


def memoryless_chain(horizon=60):
    params = MarkovChainParams(Q=np.array([[0.5]]), p0=np.array([1.0]), values=np.array([0.0]))
    return ProcessSpec(ProcessKind.MARKOV_CHAIN, params, horizon, Target(1.0))


def deterministic_chain(T=4, horizon=20):
    """States 0 -> 1 -> ... -> T-1 -> absorbed: first passage exactly at T."""
    Q = np.eye(T, k=1)
    p0 = np.eye(T)[0]
    params = MarkovChainParams(Q=Q, p0=p0, values=np.zeros(T))
    return ProcessSpec(ProcessKind.MARKOV_CHAIN, params, horizon, Target(1.0))


def double_well(horizon=300, **overrides):
    return ProcessSpec(ProcessKind.DOUBLE_WELL, DoubleWellParams(**overrides), horizon, Target(0.8))


def test_memoryless_chain_survival_is_geometric():
    n = 20_000
    curve = estimate_survival(simulate_ensemble(memoryless_chain(), Protocol.unperturbed(), n, master_seed=1))
    for t in range(11):
        exact = 0.5**t
        assert abs(curve.psi[t] - exact) <= 4 * math.sqrt(exact * (1 - exact) / n) + 1e-12


def test_resetting_a_memoryless_chain_is_inert():
    n = 20_000
    for P in (1, 2, 5):
        ens = simulate_ensemble(memoryless_chain(), Protocol.every_p(P, SR), n, master_seed=3)
        sample = fpt_sample(ens)
        se = math.sqrt(2.0 / n)  # Var[T] = 2 for the geometric law with p = 0.5
        assert abs(mean_fpt(sample) - 2.0) < 4 * se


def test_reset_before_completion_never_absorbs():
    ens = simulate_ensemble(deterministic_chain(T=4), Protocol.every_p(2, SR), 50, master_seed=0)
    assert all(not t.absorbed for t in ens.trajectories)
    unperturbed = simulate_ensemble(deterministic_chain(T=4), Protocol.unperturbed(), 50, master_seed=0)
    assert {t.fpt for t in unperturbed.trajectories} == {4}


def test_absorbed_at_multiple_of_p_is_not_perturbed():
    ens = simulate_ensemble(deterministic_chain(T=4), Protocol.every_p(4, SR), 10, master_seed=0)
    assert {t.fpt for t in ens.trajectories} == {4}


def test_simulation_is_reproducible_across_threads():
    spec = double_well(horizon=150)
    proto = Protocol.every_p(20, SNP)
    a = simulate_ensemble(spec, proto, 40, master_seed=9, threads=1)
    b = simulate_ensemble(spec, proto, 40, master_seed=9, threads=4)
    assert a == b
    c = simulate_ensemble(spec, proto, 40, master_seed=10)
    assert a != c


def test_every_p_beyond_horizon_equals_unperturbed():
    spec = double_well(horizon=120)
    a = simulate_ensemble(spec, Protocol.unperturbed(), 30, master_seed=4)
    b = simulate_ensemble(spec, Protocol.every_p(121, SNP), 30, master_seed=4)
    assert a.trajectories == b.trajectories


def test_every_p_keeps_unperturbed_first_passages_up_to_p():
    spec = double_well(horizon=400)
    P = 50
    base = simulate_ensemble(spec, Protocol.unperturbed(), 300, master_seed=12)
    pert = simulate_ensemble(spec, Protocol.every_p(P, SNP), 300, master_seed=12)
    checked = 0
    for u, p in zip(base.trajectories, pert.trajectories):
        assert u.seed == p.seed
        if u.fpt is not None and u.fpt <= P:
            assert p.fpt == u.fpt
            assert p.values == u.values
            checked += 1
        else:
            assert p.values[: P + 1] == u.values[: P + 1]
    assert checked > 0


def test_once_at_p_star_perturbs_a_single_time():
    spec = deterministic_chain(T=4, horizon=20)
    ens = simulate_ensemble(spec, Protocol.once_at(2, SR), 5, master_seed=0)
    # 2 epochs, reset, then 4 more epochs
    assert {t.fpt for t in ens.trajectories} == {6}


def test_incompatible_perturbation_fails_before_simulating():
    with pytest.raises(IncompatiblePerturbationError):
        simulate_ensemble(memoryless_chain(), Protocol.every_p(3, SNP), 10, master_seed=0)
    with pytest.raises(IncompatiblePerturbationError):
        measure_residuals(memoryless_chain(), SNP, 3, 10, master_seed=0, residual_horizon=10)


def test_run_arguments_are_validated():
    with pytest.raises(InvalidDataError):
        simulate_ensemble(memoryless_chain(), Protocol.unperturbed(), 0, master_seed=0)
    with pytest.raises(InvalidDataError):
        simulate_ensemble(memoryless_chain(), Protocol.unperturbed(), 5, master_seed=-1)
    with pytest.raises(InvalidDataError):
        Protocol(P=3)
    with pytest.raises(InvalidDataError):
        Protocol.every_p(0, SR)


def test_noise_free_double_well_stays_in_the_well():
    spec = double_well(horizon=200, beta=math.inf, start_std=0.0)
    ens = simulate_ensemble(spec, Protocol.unperturbed(), 5, master_seed=0)
    assert all(not t.absorbed for t in ens.trajectories)
    assert all(abs(v + 1.0) < 1e-12 for t in ens.trajectories for v in t.values)


def test_double_well_start_is_truncated_to_the_left_well():
    proc = build_process(double_well(start_std=2.0))
    r = np.random.default_rng(0)
    assert all(proc.initial_state(r).params[0] < 0 for _ in range(200))


def test_drift_walker_moves_away_from_target():
    spec = double_well(horizon=100, barrier=0.0, tilt=-0.5)
    ens = simulate_ensemble(spec, Protocol.unperturbed(), 200, master_seed=2)
    finals = np.array([t.values[-1] for t in ens.trajectories if not t.absorbed])
    assert finals.mean() < -5


def test_substreams_are_independent_by_phase():
    a = substream(1, 0, 0).random(4)
    b = substream(1, 0, 1).random(4)
    c = substream(1, 1, 0).random(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(a, substream(1, 0, 0).random(4))


def test_residuals_of_a_deterministic_process():
    sample = measure_residuals(deterministic_chain(T=4), SR, 2, 20, master_seed=0, residual_horizon=10)
    assert sample.residuals == (4,) * 20
    assert sample.n_survivors_at_pstar == 20
    assert mean_residual(sample) == 4.0
    assert residual_stderr(sample) == 0.0


def test_residuals_of_a_memoryless_chain():
    n = 20_000
    sample = measure_residuals(memoryless_chain(), SR, 3, n, master_seed=5, residual_horizon=60)
    # survivors at 3 are about n / 8
    assert abs(sample.n_survivors_at_pstar - n / 8) < 4 * math.sqrt(n * 0.125 * 0.875)
    assert sample.n_censored == 0
    assert abs(mean_residual(sample) - 2.0) < 4 * math.sqrt(2.0 / sample.n)


def test_residual_survivors_match_the_unperturbed_ensemble():
    spec = double_well(horizon=300)
    ens = simulate_ensemble(spec, Protocol.unperturbed(), 100, master_seed=8)
    sample = measure_residuals(spec, SNP, 40, 100, master_seed=8, residual_horizon=300)
    expected = tuple(t.id for t in ens.trajectories if t.fpt is None or t.fpt > 40)
    assert sample.survivor_ids == expected
    assert sample.n_survivors_at_pstar == int(estimate_survival(ens).at_risk[40])


def test_candidates_share_survivors_and_noise():
    spec = double_well(horizon=300)
    identity = PerturbationSpec.shrink_perturb(1.0, 0.0)
    samples = measure_residuals_many(
        spec, {"a": identity, "b": identity, "snp": SNP}, 40, 60, master_seed=8, residual_horizon=300, keep_paths=True
    )
    assert samples["a"] == samples["b"]
    assert all(np.array_equal(p, q) for p, q in zip(samples["a"].paths, samples["b"].paths))
    assert samples["a"].survivor_ids == samples["snp"].survivor_ids
    assert len(samples["a"].paths) == len(samples["a"].survivor_ids)
    assert all(isinstance(p, np.ndarray) and p.dtype == float for p in samples["a"].paths)
    # path starts at the value recorded just before the perturbation
    assert samples["a"].paths[0][0] == samples["snp"].paths[0][0]


def test_zero_survivors_is_an_error():
    with pytest.raises(EmptyConditionalError):
        measure_residuals(deterministic_chain(T=4), SR, 5, 10, master_seed=0, residual_horizon=10)
    with pytest.raises(OutOfHorizonError):
        measure_residuals(deterministic_chain(T=4, horizon=20), SR, 21, 10, master_seed=0, residual_horizon=10)


def test_mean_residual_examples():
    assert mean_residual(ResidualSample(5, (3, 5), 0, 2)) == 4.0
    assert mean_residual(ResidualSample(5, (7, 7, 7), 0, 3)) == 7.0
    with pytest.raises(CensoredBaselineError):
        mean_residual(ResidualSample(5, (), 1, 1, residual_horizon=10))
    censored = ResidualSample(5, (2,), 1, 2, residual_horizon=10)
    with pytest.raises(CensoredBaselineError):
        mean_residual(censored)
    assert mean_residual(censored, allow_censored=True) == 6.0
    with pytest.raises(InvalidDataError):
        ResidualSample(5, (3,), 0, 2)


def test_tau_sweep_reports_regime():
    samples = tau_sweep(deterministic_chain(T=4, horizon=40), SR, [1, 2, 3], 10, master_seed=0, residual_horizon=20)
    assert [s.p_star for s in samples] == [1, 2, 3]
    assert [sweep_regime(s) for s in samples] == ["frequent", "frequent", "frequent"]
    far = tau_sweep(memoryless_chain(), SR, [4], 5000, master_seed=0, residual_horizon=60)
    assert sweep_regime(far[0]) == "rare"


def test_toy_sgd_gradient_matches_finite_differences():
    proc = build_process(ProcessSpec(ProcessKind.TOY_SGD, ToySgdParams(), 10, Target(0.05, "at_most")))
    theta = np.random.default_rng(0).uniform(-0.5, 0.5, size=proc.d)
    batch = np.arange(proc.p.n_samples)
    grad = proc.gradient(theta, batch)
    eps = 1e-6
    for i in (0, 5, proc.d - 1):
        bump = np.zeros(proc.d)
        bump[i] = eps
        numeric = (proc.loss(theta + bump) - proc.loss(theta - bump)) / (2 * eps)
        assert math.isclose(grad[i], numeric, rel_tol=1e-4, abs_tol=1e-7)


@pytest.mark.parametrize("optimizer", ["sgd", "momentum", "adam"])
def test_toy_sgd_training_lowers_the_loss(optimizer):
    params = ToySgdParams(optimizer=optimizer, learning_rate=0.05 if optimizer == "sgd" else 0.01)
    spec = ProcessSpec(ProcessKind.TOY_SGD, params, 30, Target(0.0, "at_most"))
    ens = simulate_ensemble(spec, Protocol.unperturbed(), 4, master_seed=1)
    for t in ens.trajectories:
        assert t.values[-1] < t.values[0]


def test_full_sr_restarts_optimizer_state():
    spec = ProcessSpec(ProcessKind.TOY_SGD, ToySgdParams(optimizer="adam"), 10, Target(0.0, "at_most"))
    proc = build_process(spec)
    r = np.random.default_rng(0)
    state = proc.advance(proc.initial_state(r), r)
    assert state.aux[2] == proc.p.inner_steps
    assert proc.initial_state(r).aux[2] == 0


def test_paths_are_only_kept_on_request():
    samples = measure_residuals_many(double_well(horizon=300), {"snp": SNP}, 40, 60, master_seed=8, residual_horizon=50)
    assert samples["snp"].paths is None

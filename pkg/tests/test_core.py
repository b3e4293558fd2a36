import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpt_perturb.core import (
    Direction,
    Ensemble,
    FptSample,
    SurvivalCurve,
    Target,
    Trajectory,
    centered_metric_stats,
    conditional_metric_stats,
    estimate_survival,
    extract_fpt,
    fpt_sample,
    mean_fpt,
    partial_sum,
    retarget,
    survival_stderr,
)
from fpt_perturb.errors import CensoredBaselineError, InvalidDataError, OutOfHorizonError

TARGET = Target(1.0)


def traj(i, fpt=None, horizon=3):
    if fpt is None:
        return Trajectory(id=i, seed=i, values=(0.0,) * (horizon + 1), censored_at=horizon)
    return Trajectory(id=i, seed=i, values=(0.0,) * fpt + (1.0,), fpt=fpt)


def ensemble(fpts, horizon=3):
    return Ensemble(tuple(traj(i, f, horizon) for i, f in enumerate(fpts)), TARGET, horizon)


def geometric_curve(q, horizon=40):
    return SurvivalCurve.from_exact(q ** np.arange(horizon + 1))


def test_extract_fpt_examples():
    assert extract_fpt([0.1, 0.3, 0.8, 0.9], Target(0.8)) == 2
    assert extract_fpt([0.5, 0.5], Target(0.9)) is None
    assert extract_fpt([1.2, 0.6, 0.3], Target(0.4, Direction.AT_MOST)) == 2


def test_extract_fpt_ignores_index_zero_and_counts_ties():
    assert extract_fpt([0.9, 0.1, 0.8], Target(0.8)) == 2
    assert extract_fpt([0.0, 0.8], Target(0.8)) == 1


def test_extract_fpt_rejects_non_finite():
    with pytest.raises(InvalidDataError):
        extract_fpt([0.1, float("nan")], Target(0.8))
    with pytest.raises(InvalidDataError):
        extract_fpt([], Target(0.8))


@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=30),
    st.lists(st.floats(-5, 5), max_size=10),
)
def test_extract_fpt_invariant_under_appending_after_crossing(values, extra):
    target = Target(1.0)
    first = extract_fpt(values, target)
    if first is not None:
        assert extract_fpt(values + extra, target) == first


def test_estimate_survival_examples():
    curve = estimate_survival(ensemble([1, 2, 2, None]))
    assert curve.psi.tolist() == [1.0, 0.75, 0.25, 0.25]
    assert curve.at_risk.tolist() == [4, 3, 1, 1]
    assert not curve.fully_absorbed

    censored = estimate_survival(ensemble([None, None]))
    assert censored.psi.tolist() == [1.0, 1.0, 1.0, 1.0]
    assert not censored.fully_absorbed

    fast = estimate_survival(ensemble([1, 1, 1]))
    assert fast.psi.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert fast.fully_absorbed


def test_ensemble_validation():
    with pytest.raises(InvalidDataError):
        Ensemble((), TARGET, 3)
    with pytest.raises(InvalidDataError):
        Ensemble((traj(0, 1), traj(0, 2)), TARGET, 3)
    # recorded fpt must agree with the values
    bad = Trajectory(id=0, seed=0, values=(0.0, 1.0, 1.0), fpt=2)
    with pytest.raises(InvalidDataError):
        Ensemble((bad,), TARGET, 3)
    with pytest.raises(InvalidDataError):
        Trajectory(id=0, seed=0, values=(0.0, 1.0), fpt=1, censored_at=1)


fpt_lists = st.lists(st.one_of(st.none(), st.integers(1, 12)), min_size=1, max_size=40)


@given(fpt_lists)
def test_survival_is_non_increasing(fpts):
    curve = estimate_survival(ensemble(fpts, horizon=12))
    assert curve.psi[0] == 1.0
    assert np.all(np.diff(curve.psi) <= 0)


@given(fpt_lists, st.randoms(use_true_random=False))
def test_survival_is_permutation_invariant(fpts, rnd):
    shuffled = list(enumerate(fpts))
    rnd.shuffle(shuffled)
    a = estimate_survival(ensemble(fpts, horizon=12))
    b = estimate_survival(Ensemble(tuple(traj(i, f, 12) for i, f in shuffled), TARGET, 12))
    assert np.array_equal(a.psi, b.psi)


@given(st.lists(st.integers(1, 12), min_size=1, max_size=40))
def test_mean_fpt_equals_survival_sum(fpts):
    ens = ensemble(fpts, horizon=12)
    assert math.isclose(mean_fpt(fpt_sample(ens)), partial_sum(estimate_survival(ens), 12), abs_tol=1e-12)


def test_mean_fpt_examples():
    assert mean_fpt(FptSample((2, 4), 0, 10)) == 3.0
    assert mean_fpt(FptSample((5, 5, 5), 0, 10)) == 5.0
    with pytest.raises(CensoredBaselineError) as info:
        mean_fpt(FptSample((1, 2, 2), 1, 10))
    assert info.value.n_censored == 1
    assert info.value.exit_code == 5


def test_partial_sum_examples():
    assert partial_sum(SurvivalCurve.from_exact([1, 0.5, 0.25, 0.125]), 2) == 1.5
    assert partial_sum(SurvivalCurve.from_counts([4] * 10, 4), 7) == 7
    assert partial_sum(geometric_curve(0.5), 3) == 1.75
    with pytest.raises(OutOfHorizonError):
        partial_sum(geometric_curve(0.5, horizon=5), 6)
    with pytest.raises(OutOfHorizonError):
        partial_sum(geometric_curve(0.5, horizon=5), 0)


def test_survival_stderr_is_binomial():
    curve = estimate_survival(ensemble([1, 2, 2, None]))
    se = survival_stderr(curve)
    assert se[0] == 0.0
    assert math.isclose(se[1], math.sqrt(0.75 * 0.25 / 4))
    assert not survival_stderr(geometric_curve(0.5)).any()


def test_retarget_to_easier_threshold():
    values = (0.0, 0.4, 0.7, 1.0)
    ens = Ensemble((Trajectory(0, 0, values, fpt=3), traj(1, None)), TARGET, 3)
    easier = retarget(ens, Target(0.5))
    assert easier.trajectories[0].fpt == 2
    assert easier.trajectories[0].values == (0.0, 0.4, 0.7)
    assert easier.trajectories[1].fpt is None
    with pytest.raises(InvalidDataError):
        retarget(ens, Target(2.0))
    with pytest.raises(InvalidDataError):
        retarget(ens, Target(0.5, Direction.AT_MOST))


def _valued_ensemble(columns):
    """Censored trajectories whose epoch-1 values are ``columns``."""
    trajs = tuple(
        Trajectory(id=i, seed=i, values=(0.0, v, 0.0), censored_at=2) for i, v in enumerate(columns)
    )
    return Ensemble(trajs, Target(100.0), 2)


def test_conditional_metric_stats_examples():
    stats = conditional_metric_stats(_valued_ensemble([0.2, 0.4]), [0.5])
    assert math.isclose(stats.mean[1], 0.3)
    assert stats.column(0.5)[1] == 0.2

    single = conditional_metric_stats(_valued_ensemble([0.7]), [0.5])
    assert single.mean[1] == 0.7 and single.column(0.5)[1] == 0.7

    deciles = conditional_metric_stats(_valued_ensemble([float(v) for v in range(1, 11)]), [0.1, 0.9])
    assert deciles.column(0.1)[1] == 1.0
    assert deciles.column(0.9)[1] == 9.0
    assert deciles.at_risk.tolist() == [10, 10, 10]


def test_conditional_metric_stats_rows_stop_without_survivors():
    stats = conditional_metric_stats(ensemble([1, 1]), [0.5])
    assert stats.epochs.tolist() == [0]
    with pytest.raises(InvalidDataError):
        conditional_metric_stats(ensemble([1]), [1.5])


def test_centered_metric_stats_drops_absorbing_values():
    paths = [(0.1, 0.2, 1.0), (0.3, 0.4, 0.5, 0.6)]
    stats = centered_metric_stats(paths, [True, False], [0.5], offset=10)
    assert stats.offset == 10
    assert stats.at_risk.tolist() == [2, 2, 1, 1]
    assert math.isclose(stats.mean[1], 0.3)
    assert stats.mean[2] == 0.5


@settings(max_examples=50)
@given(st.floats(0.05, 0.95))
def test_from_exact_curve_is_clipped_and_monotone(q):
    raw = q ** np.arange(30) + np.r_[0, 1e-17 * np.ones(29)]
    curve = SurvivalCurve.from_exact(raw)
    assert curve.exact
    assert np.all(np.diff(curve.psi) <= 0)
    assert curve.psi[0] == 1.0

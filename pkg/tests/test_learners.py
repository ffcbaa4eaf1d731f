import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drqlearn import NumericError, ParameterError, sample_dataset
from drqlearn.data import TransitionDataset
from drqlearn.features import random_features
from drqlearn.learners import discounted_ratio_returns, fqe, mql, q_regression, q_regression_targets
from drqlearn.mdp import exact_policy_q, make_chain_mdp, make_random_mdp
from drqlearn.policy import StochasticPolicy


def _relative_error(q, truth):
    return np.linalg.norm(q.values() - truth) / np.linalg.norm(truth)


@pytest.fixture(scope="module")
def single_state():
    mdp = make_chain_mdp(1, 0.0, 0.9)
    pi = StochasticPolicy.uniform(1, 1)
    return mdp, pi, sample_dataset(mdp, pi, 20, 50, seed=0)


@pytest.fixture(scope="module")
def three_state():
    mdp = make_random_mdp(3, 2, 0.9, 21)
    pi_b = StochasticPolicy.uniform(3, 2)
    pi_e = StochasticPolicy(np.array([[0.6, 0.4], [0.4, 0.6], [0.55, 0.45]]))
    ds = sample_dataset(mdp, pi_b, 400, 100, seed=3)
    return mdp, pi_e, pi_b, ds


def test_fqe_single_state(single_state):
    _, pi, ds = single_state
    assert fqe(ds, pi, 0.9).values()[0, 0] == pytest.approx(10.0, abs=0.06)


def test_fqe_tiny_gamma_is_mean_reward():
    mdp = make_random_mdp(3, 2, 0.9, 1)
    ds = sample_dataset(mdp, StochasticPolicy.uniform(3, 2), 30, 20, seed=2)
    q = fqe(ds, StochasticPolicy.uniform(3, 2), 1e-12).values()
    for s in range(3):
        for a in range(2):
            rows = (ds.s == s) & (ds.a == a)
            assert q[s, a] == pytest.approx(ds.r[rows].mean(), abs=1e-6)


def test_fqe_recovers_truth(three_state):
    mdp, pi_e, _, ds = three_state
    assert _relative_error(fqe(ds, pi_e, 0.9), exact_policy_q(mdp, pi_e).values()) < 0.05


def test_fqe_iterates_contract(three_state):
    _, pi_e, _, ds = three_state
    _, path = fqe(ds, pi_e, 0.9, iterations=30, return_path=True)
    gaps = [np.abs(b.values() - a.values()).max() for a, b in zip(path, path[1:])]
    for prev, cur in zip(gaps, gaps[1:]):
        assert cur <= 0.9 * prev + 1e-9


def test_fqe_argument_checks(single_state):
    _, pi, ds = single_state
    with pytest.raises(ParameterError):
        fqe(ds, pi, 0.9, iterations=0)
    with pytest.raises(ParameterError):
        fqe(ds, pi, 0.9, ridge=-1.0)


def test_ridge_moves_solution_smoothly(three_state):
    _, pi_e, _, ds = three_state
    fmap = random_features(3, 2, 4, seed=0)
    base = fqe(ds, pi_e, 0.9, fclass=fmap, ridge=0.0).values()
    small = fqe(ds, pi_e, 0.9, fclass=fmap, ridge=1e-6).values()
    assert np.max(np.abs(base - small)) < 1e-3


def test_discounted_returns_by_hand():
    ds = TransitionDataset([0, 0, 0], [0, 1, 2], [0, 0, 0], [0, 0, 0], [1.0, 2.0, 3.0], [0, 0, 0],
                           n_states=1, n_actions=1)
    ratios = np.array([1.0, 2.0, 0.5])
    Y = discounted_ratio_returns(ds, ratios, 0.5)
    # Y2 = 3, Y1 = 2 + 0.5*0.5*3, Y0 = 1 + 0.5*2*Y1
    np.testing.assert_allclose(Y, [1 + 1.0 * 2.75, 2.75, 3.0])


def test_q_regression_single_state(single_state):
    _, pi, ds = single_state
    Y, weights = q_regression_targets(ds, pi, pi, 0.9)
    np.testing.assert_allclose(Y, (1 - 0.9 ** (50 - ds.step)) / 0.1)
    np.testing.assert_allclose(weights, 0.9 ** ds.step)
    expected = np.sum(weights * Y) / np.sum(weights)
    assert q_regression(ds, pi, pi, 0.9).values()[0, 0] == pytest.approx(expected, rel=1e-8)


def test_q_regression_on_policy_accuracy():
    mdp = make_random_mdp(3, 2, 0.9, 21)
    pi = StochasticPolicy.uniform(3, 2)
    ds = sample_dataset(mdp, pi, 400, 150, seed=5)
    assert _relative_error(q_regression(ds, pi, pi, 0.9), exact_policy_q(mdp, pi).values()) < 0.1


def test_q_regression_target_spread_grows_with_horizon(three_state):
    mdp, pi_e, pi_b, ds = three_state
    spreads = []
    for h in (3, 10, 20):
        gamma = 1 - 1 / h
        Y, _ = q_regression_targets(ds, pi_e, pi_b, gamma)
        spreads.append(Y[ds.step == 0].var())
    assert spreads[0] < spreads[1] < spreads[2]


def test_q_regression_overflow_guard():
    n = 60
    ds = TransitionDataset(np.zeros(n, int), np.arange(n), np.zeros(n, int), np.zeros(n, int), np.ones(n),
                           np.zeros(n, int), n_states=1, n_actions=2)
    pi_e = StochasticPolicy(np.array([[1.0, 0.0]]))
    pi_b = StochasticPolicy(np.array([[0.5, 0.5]]))
    with pytest.raises(NumericError):
        q_regression(ds, pi_e, pi_b, 0.99)


def test_mql_single_state(single_state):
    _, pi, ds = single_state
    assert mql(ds, pi, pi, 0.9, ridge=0.0).values()[0, 0] == pytest.approx(10.0, rel=1e-9)
    assert mql(ds, pi, pi, 0.9).values()[0, 0] == pytest.approx(10.0, rel=1e-6)


def test_mql_off_policy_accuracy(three_state):
    mdp, pi_e, pi_b, ds = three_state
    assert _relative_error(mql(ds, pi_e, pi_b, 0.9), exact_policy_q(mdp, pi_e).values()) < 0.05


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.2, 0.9))
def test_mql_matches_fqe_fixed_point_on_policy(seed, gamma):
    mdp = make_random_mdp(3, 2, gamma, seed)
    pi = StochasticPolicy.uniform(3, 2)
    ds = sample_dataset(mdp, pi, 20, 30, seed=seed)
    if len(np.unique(ds.s * 2 + ds.a)) < 6:
        return
    a = mql(ds, pi, pi, gamma, ridge=0.0).values()
    b = fqe(ds, pi, gamma, iterations=400, ridge=0.0).values()
    np.testing.assert_allclose(a, b, atol=1e-6)

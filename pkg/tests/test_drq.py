import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drqlearn import ParameterError, PositivityError, sample_dataset
from drqlearn.data import TransitionDataset
from drqlearn.drq import (LossConfig, NuisanceDirection, build_pseudo_outcomes, empirical_L3, empirical_quadratic,
                          episode_folds, fit_drq, fit_drq_population, population_L1, population_L3,
                          population_quadratic, probe_response, quasi_oracle_errors, td_error_zero_check)
from drqlearn.mdp import (behavior_state_distribution, exact_policy_q, make_chain_mdp, make_random_mdp,
                          make_taxi_mdp, value_iteration)
from drqlearn.nuisance import (BehaviorPolicyEstimate, DensityRatioEstimate, NuisanceSet, corrupt,
                               oracle_nuisances)
from drqlearn.policy import StochasticPolicy, epsilon_greedy
from drqlearn.qfunction import QFunction

from oracles import empirical_l3_loops, phi1_row, phi2_row, population_l3_loops


@pytest.fixture(scope="module")
def single():
    mdp = make_chain_mdp(1, 0.0, 0.9)
    pi = StochasticPolicy.uniform(1, 1)
    ns = oracle_nuisances(mdp, pi, pi)
    return mdp, pi, ns, sample_dataset(mdp, pi, 5, 20, seed=0)


@pytest.fixture(scope="module")
def small():
    mdp = make_random_mdp(3, 2, 0.9, 13)
    q_star = value_iteration(mdp)
    pi_b, pi_e = epsilon_greedy(q_star, 0.6), epsilon_greedy(q_star, 0.2)
    return mdp, pi_e, pi_b, oracle_nuisances(mdp, pi_e, pi_b)


def _noisy(ns, seed):
    """A valid but wrong nuisance set."""
    rng = np.random.default_rng(seed)
    pb = ns.pi_b_hat.probs * rng.uniform(0.5, 1.5, ns.pi_b_hat.probs.shape)
    return NuisanceSet(BehaviorPolicyEstimate(pb / pb.sum(axis=1, keepdims=True)),
                       DensityRatioEstimate(ns.w_hat.w * rng.uniform(0.5, 1.5, ns.w_hat.w.shape)),
                       QFunction.tabular(ns.q1_hat.values() + rng.standard_normal(ns.q1_hat.shape)))


# -- pseudo-outcomes ----------------------------------------------------------------

def test_single_state_pseudo_outcomes(single):
    _, pi, ns, ds = single
    po = build_pseudo_outcomes(ds, ns, pi, 0.9)
    np.testing.assert_allclose(po.td, 0.0, atol=1e-12)
    np.testing.assert_allclose(po.phi1, 10.0)
    np.testing.assert_allclose(po.phi2(np.arange(len(ds)), 0, 0), 10.0)


def test_pseudo_outcomes_reduce_to_q_without_residual_weight():
    ds = TransitionDataset([0], [0], [0], [1], [2.0], [1], n_states=2, n_actions=2)
    q1 = np.array([[1.0, 3.0], [0.5, 0.5]])
    ns = NuisanceSet(BehaviorPolicyEstimate(np.full((2, 2), 0.5)), DensityRatioEstimate(np.zeros((2, 2, 2))),
                     QFunction.tabular(q1))
    pi_e = StochasticPolicy(np.array([[0.0, 1.0], [1.0, 0.0]]))
    po = build_pseudo_outcomes(ds, ns, pi_e, 0.5)
    # td = 2 + 0.5 * 0.5 - 3
    assert po.td[0] == pytest.approx(-0.75)
    np.testing.assert_allclose(po.phi1[0], [1.0, 3.0 + 2 * -0.75 / 0.5])
    assert po.phi2(0, 1, 0) == pytest.approx(0.5)


def test_taxi_pseudo_outcomes_match_definitions():
    mdp = make_taxi_mdp(0.9)
    q = value_iteration(mdp)
    pi_b, pi_e = epsilon_greedy(q, 0.5), epsilon_greedy(q, 0.1)
    ds = sample_dataset(mdp, pi_b, 10, 100, seed=4)
    p = behavior_state_distribution(mdp, pi_b, horizon=100)
    ns = corrupt(oracle_nuisances(mdp, pi_e, pi_b, p_b_state=p, unvisited="zero"), "q1", "additive_bias", 0.3)
    po = build_pseudo_outcomes(ds, ns, pi_e, 0.9)
    rng = np.random.default_rng(0)
    term = np.array(mdp.terminal_mask)
    q1, pb, w = ns.q1_hat.values(), ns.pi_b_hat.probs, ns.w_hat.w
    for j in rng.choice(len(ds), 100, replace=False):
        a = rng.integers(6)
        s = rng.integers(500)
        row = (ds.s[j], ds.a[j], ds.r[j], ds.s_next[j])
        assert po.phi1[j, a] == pytest.approx(phi1_row(*row, a, 0.9, pi_e.probs, pb, q1, term), abs=1e-9)
        assert po.phi2(j, s, a) == pytest.approx(phi2_row(*row, s, a, 0.9, pi_e.probs, pb, w, q1, term),
                                                 abs=1e-9)


def test_zero_behavior_probability_raises(single):
    _, pi, ns, ds = single
    mdp = make_random_mdp(2, 2, 0.9, 0)
    ds = sample_dataset(mdp, StochasticPolicy.uniform(2, 2), 5, 10, seed=0)
    bad = NuisanceSet(BehaviorPolicyEstimate(np.array([[1.0, 0.0], [1.0, 0.0]])),
                      DensityRatioEstimate(np.ones((2, 2, 2))), QFunction.tabular(np.zeros((2, 2))))
    with pytest.raises(PositivityError):
        build_pseudo_outcomes(ds, bad, StochasticPolicy.uniform(2, 2), 0.9)


# -- empirical loss ------------------------------------------------------------------

def test_single_state_loss_values(single):
    _, pi, ns, ds = single
    assert empirical_L3(ds, ns, pi, 0.9, np.array([[10.0]])) == pytest.approx(0.0, abs=1e-12)
    for c in (0.5, 2.0, -3.0):
        assert empirical_L3(ds, ns, pi, 0.9, np.array([[10.0 + c]])) == pytest.approx(2 * c * c)


def test_single_state_fit(single):
    _, pi, ns, ds = single
    assert fit_drq(ds, ns, pi, 0.9).values()[0, 0] == pytest.approx(10.0, abs=1e-6)
    bad = corrupt(ns, "q1", "additive_bias", 4.0)
    # the TD correction undoes a constant first-stage bias when the data are on-policy
    g = fit_drq(ds, bad, pi, 0.9, cfg=LossConfig(cross_fit_folds=1)).values()[0, 0]
    assert g == pytest.approx(10.0, abs=1e-6)


@pytest.fixture(scope="module")
def small_data(small):
    mdp, pi_e, pi_b, ns = small
    ds = sample_dataset(mdp, pi_b, 6, 5, seed=2)
    return ds, _noisy(ns, 1)


def test_quadratic_form_matches_loop_oracle(small, small_data):
    mdp, pi_e, _, _ = small
    ds, ns = small_data
    quad = empirical_quadratic(ds, ns, pi_e, 0.9, LossConfig(cross_fit_folds=1))
    rows = list(zip(ds.s, ds.a, ds.r, ds.s_next))
    term = np.zeros(3, dtype=bool)
    rng = np.random.default_rng(5)
    for _ in range(100):
        g = rng.normal(5, 3, (3, 2))
        expected = empirical_l3_loops(rows, 0.9, pi_e.probs, ns.pi_b_hat.probs, ns.w_hat.w,
                                      ns.q1_hat.values(), g, term)
        assert quad.value(g) == pytest.approx(expected, rel=1e-9)


def test_cross_fitting_uses_each_fold_nuisance(small, small_data):
    _, pi_e, _, ns0 = small
    ds, ns1 = small_data
    cfg = LossConfig(cross_fit_folds=2, seed=3)
    folds = episode_folds(ds, 2, 3)
    g = np.random.default_rng(0).normal(5, 1, (3, 2))
    split = empirical_L3(ds, [ns0, ns1], pi_e, 0.9, g, cfg)
    rows0 = [r for r, f in zip(zip(ds.s, ds.a, ds.r, ds.s_next), folds) if f == 0]
    rows1 = [r for r, f in zip(zip(ds.s, ds.a, ds.r, ds.s_next), folds) if f == 1]
    term = np.zeros(3, dtype=bool)
    marg = np.bincount(ds.s, minlength=3) / len(ds)

    def part(rows, ns):
        # the inner expectation always uses the pooled marginal
        total = 0.0
        q1, pb, w = ns.q1_hat.values(), ns.pi_b_hat.probs, ns.w_hat.w
        for s1, a1, r, s2 in rows:
            total += sum(pi_e.probs[s1, a] * (phi1_row(s1, a1, r, s2, a, 0.9, pi_e.probs, pb, q1, term)
                                              - g[s1, a]) ** 2 for a in range(2))
            for s in range(3):
                for a in range(2):
                    phi2 = phi2_row(s1, a1, r, s2, s, a, 0.9, pi_e.probs, pb, w, q1, term)
                    total += marg[s] * pi_e.probs[s, a] * (phi2 - g[s, a]) ** 2
        return total

    assert split == pytest.approx((part(rows0, ns0) + part(rows1, ns1)) / len(ds), rel=1e-9)


def test_wrong_number_of_fold_sets(small, small_data):
    _, pi_e, _, ns = small
    ds, _ = small_data
    with pytest.raises(ParameterError):
        empirical_quadratic(ds, [ns, ns, ns], pi_e, 0.9, LossConfig(cross_fit_folds=2))


def test_subsample_agrees_with_exact_marginal(small, small_data):
    _, pi_e, _, _ = small
    ds, ns = small_data
    g = np.full((3, 2), 4.0)
    exact = empirical_L3(ds, ns, pi_e, 0.9, g, LossConfig(cross_fit_folds=1))
    draws = [empirical_L3(ds, ns, pi_e, 0.9, g, LossConfig("subsample", 10_000, 1, seed=s)) for s in range(5)]
    se = np.std(draws, ddof=1) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - exact) < 3 * se + 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 100.0))
def test_loss_is_non_negative(seed, scale):
    mdp = make_random_mdp(3, 2, 0.9, 13)
    pi = StochasticPolicy.uniform(3, 2)
    ns = _noisy(oracle_nuisances(mdp, pi, pi), seed)
    ds = sample_dataset(mdp, pi, 4, 5, seed=seed)
    g = np.random.default_rng(seed).normal(0, scale, (3, 2))
    assert empirical_L3(ds, ns, pi, 0.9, g, LossConfig(cross_fit_folds=1)) >= 0.0
    assert population_L3(mdp, pi, pi, ns, g) >= 0.0


def test_episode_folds_keep_episodes_together():
    mdp = make_random_mdp(3, 2, 0.9, 1)
    ds = sample_dataset(mdp, StochasticPolicy.uniform(3, 2), 11, 4, seed=0)
    folds = episode_folds(ds, 3, seed=7)
    for e in range(11):
        assert np.unique(folds[ds.episode_id == e]).size == 1
    np.testing.assert_array_equal(folds, episode_folds(ds, 3, seed=7))
    per_fold = [np.unique(ds.episode_id[folds == k]).size for k in range(3)]
    assert max(per_fold) - min(per_fold) <= 1
    with pytest.raises(ParameterError):
        episode_folds(ds, 12)


# -- population loss ------------------------------------------------------------------

def test_population_matches_loop_oracle(small):
    mdp, pi_e, pi_b, ns0 = small
    ns = _noisy(ns0, 9)
    p = behavior_state_distribution(mdp, pi_b)
    rng = np.random.default_rng(2)
    for _ in range(5):
        g = rng.normal(5, 2, (3, 2))
        expected = population_l3_loops(np.array(mdp.transition), np.array(mdp.reward), 0.9, pi_e.probs,
                                       pi_b.probs, ns.pi_b_hat.probs, ns.w_hat.w, ns.q1_hat.values(), p, g)
        assert population_L3(mdp, pi_e, pi_b, ns, g) == pytest.approx(expected, rel=1e-10)


def test_population_limit_of_empirical(small):
    mdp, pi_e, pi_b, ns0 = small
    ns = _noisy(ns0, 4)
    p = behavior_state_distribution(mdp, pi_b)
    rng = np.random.default_rng(0)
    n = 1_000_000
    s = rng.choice(3, n, p=p)
    a = (rng.random(n) > pi_b.probs[s, 0]).astype(int)
    cdf = np.cumsum(np.array(mdp.transition)[s, a], axis=1)
    s2 = np.minimum((rng.random((n, 1)) > cdf).sum(axis=1), 2)
    ds = TransitionDataset(np.arange(n), np.zeros(n, int), s, a, np.array(mdp.reward)[s, a], s2,
                           n_states=3, n_actions=2)
    g = np.full((3, 2), 5.0)
    emp = empirical_L3(ds, ns, pi_e, 0.9, g, LossConfig(cross_fit_folds=1))
    assert emp == pytest.approx(population_L3(mdp, pi_e, pi_b, ns, g, p), rel=0.01)


def test_oracle_loss_at_truth_zero_only_for_deterministic_moves(single, small):
    mdp, pi, ns, _ = single
    assert population_L3(mdp, pi, pi, ns, ns.q1_hat.values()) == pytest.approx(0.0, abs=1e-10)
    mdp, pi_e, pi_b, ns = small
    # stochastic transitions leave a variance term at the truth, but the truth is still the argmin
    assert population_L3(mdp, pi_e, pi_b, ns, ns.q1_hat.values()) > 0.1
    np.testing.assert_allclose(fit_drq_population(mdp, pi_e, pi_b, ns).values(), ns.q1_hat.values(), atol=1e-9)


def test_double_robustness(small):
    mdp, pi_e, pi_b, ns = small
    truth = ns.q1_hat.values()
    bad = _noisy(ns, 3)
    # right Q1, wrong behavior policy and ratio
    keep_q = NuisanceSet(bad.pi_b_hat, bad.w_hat, ns.q1_hat)
    np.testing.assert_allclose(fit_drq_population(mdp, pi_e, pi_b, keep_q).values(), truth, atol=1e-9)
    # right behavior policy and ratio, wrong Q1
    keep_rest = NuisanceSet(ns.pi_b_hat, ns.w_hat, bad.q1_hat)
    np.testing.assert_allclose(fit_drq_population(mdp, pi_e, pi_b, keep_rest).values(), truth, atol=1e-9)
    # all wrong: the fit moves off the truth
    assert np.max(np.abs(fit_drq_population(mdp, pi_e, pi_b, bad).values() - truth)) > 1e-3


def test_plug_in_loss_is_zero_at_first_stage(small):
    mdp, pi_e, pi_b, ns = small
    assert population_L1(mdp, pi_e, pi_b, ns, ns.q1_hat.values()) == 0.0


# -- diagnostics ----------------------------------------------------------------------

def test_probe_rejects_zero_direction_and_bad_grid(small):
    mdp, pi_e, pi_b, ns = small
    zero = NuisanceDirection.random(ns, (), 0)
    with pytest.raises(ParameterError):
        probe_response(mdp, pi_e, pi_b, zero)
    with pytest.raises(ParameterError):
        probe_response(mdp, pi_e, pi_b, NuisanceDirection.random(ns, ("q1",)), eps_grid=(0.1, 0.2, 0.3, 0.4))


def test_probe_joint_directions_are_second_order(small):
    mdp, pi_e, pi_b, ns = small
    for comps in (("q1", "w"), ("q1", "pi_b"), ("pi_b", "w", "q1")):
        res = probe_response(mdp, pi_e, pi_b, NuisanceDirection.random(ns, comps, 1))
        assert 1.8 <= res.slope <= 2.2, comps


def test_probe_single_directions_leave_gradient_unchanged(small):
    mdp, pi_e, pi_b, ns = small
    for comp in ("pi_b", "w", "q1"):
        res = probe_response(mdp, pi_e, pi_b, NuisanceDirection.random(ns, (comp,), 1))
        assert np.all(res.response <= res.floor), comp
        assert np.isnan(res.slope)


def test_plug_in_probe_is_first_order(small):
    mdp, pi_e, pi_b, ns = small
    res = probe_response(mdp, pi_e, pi_b, NuisanceDirection.random(ns, ("q1",), 1), loss="L1")
    assert res.slope == pytest.approx(1.0, abs=0.05)


def test_quasi_oracle_rate(small):
    mdp, pi_e, pi_b, _ = small
    _, errors, slope = quasi_oracle_errors(mdp, pi_e, pi_b)
    assert np.all(np.diff(errors) < 0)
    assert slope >= 3.5


def test_td_error_check(small):
    mdp, pi_e, pi_b, ns = small
    f = np.random.default_rng(0).uniform(0, 1, (3, 2))
    assert td_error_zero_check(mdp, pi_b, pi_e, f) < 1e-10
    shifted = ns.q1_hat.values() + 1.0
    d = behavior_state_distribution(mdp, pi_b)
    expected = 0.1 * np.sum(d[:, None] * pi_b.probs * f)
    assert td_error_zero_check(mdp, pi_b, pi_e, f, q=shifted) == pytest.approx(expected, rel=1e-9)

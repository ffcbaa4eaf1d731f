"""Scikit-learn style estimators wrapping the learners.

Every estimator is fitted on a :class:`~drqlearn.data.TransitionDataset`
and predicts Q-values for paired state and action arrays::

    est = DRQLearner(pi_e, gamma=0.9, density_ratio=w).fit(ds)
    est.predict(states, actions)
"""

import numpy as np
from sklearn.base import BaseEstimator, clone

from .drq import LossConfig, episode_folds, fit_drq
from .exceptions import ParameterError
from .learners import DEFAULT_RIDGE, FQE_ITERATIONS, fqe, mql, q_regression
from .nuisance import (DEFAULT_SMOOTHING, BehaviorPolicyEstimate, DensityRatioEstimate, NuisanceSet,
                       estimate_behavior_policy)


class _QEstimator(BaseEstimator):
    """Shared prediction and scoring logic."""

    def predict(self, states, actions):
        self._check_fitted()
        return self.q_function_(np.asarray(states), np.asarray(actions))

    def q_table(self):
        """Fitted values on the full ``(n_states, n_actions)`` grid."""
        self._check_fitted()
        return self.q_function_.values()

    def _check_fitted(self):
        if not hasattr(self, "q_function_"):
            raise AttributeError(f"{type(self).__name__} is not fitted yet; call fit first")


def _behavior(behavior_policy, ds, smoothing):
    if behavior_policy is None:
        return estimate_behavior_policy(ds, smoothing)
    if isinstance(behavior_policy, BehaviorPolicyEstimate):
        return behavior_policy
    return BehaviorPolicyEstimate.from_policy(behavior_policy)


class FittedQEvaluation(_QEstimator):
    """Fitted Q evaluation, iterated from the zero function."""

    def __init__(self, pi_e=None, gamma=0.9, model_class="tabular", iterations=FQE_ITERATIONS,
                 ridge=DEFAULT_RIDGE):
        self.pi_e = pi_e
        self.gamma = gamma
        self.model_class = model_class
        self.iterations = iterations
        self.ridge = ridge

    def fit(self, ds, y=None):
        self.q_function_ = fqe(ds, self.pi_e, self.gamma, self.model_class, self.iterations, self.ridge)
        return self


class QRegression(_QEstimator):
    """Importance-weighted regression on discounted returns.

    ``behavior_policy=None`` estimates the behavior policy from the data
    with additive ``smoothing``; pass the true policy for oracle ratios.
    """

    def __init__(self, pi_e=None, gamma=0.9, model_class="tabular", behavior_policy=None,
                 smoothing=DEFAULT_SMOOTHING, ridge=DEFAULT_RIDGE):
        self.pi_e = pi_e
        self.gamma = gamma
        self.model_class = model_class
        self.behavior_policy = behavior_policy
        self.smoothing = smoothing
        self.ridge = ridge

    def fit(self, ds, y=None):
        pb = _behavior(self.behavior_policy, ds, self.smoothing)
        self.q_function_ = q_regression(ds, self.pi_e, pb, self.gamma, self.model_class, self.ridge)
        return self


class MinimaxQLearning(_QEstimator):
    """Minimax Q-learning solved through its linear moment system."""

    def __init__(self, pi_e=None, gamma=0.9, model_class="tabular", behavior_policy=None,
                 smoothing=DEFAULT_SMOOTHING, ridge=DEFAULT_RIDGE):
        self.pi_e = pi_e
        self.gamma = gamma
        self.model_class = model_class
        self.behavior_policy = behavior_policy
        self.smoothing = smoothing
        self.ridge = ridge

    def fit(self, ds, y=None):
        pb = _behavior(self.behavior_policy, ds, self.smoothing)
        self.q_function_ = mql(ds, self.pi_e, pb, self.gamma, self.model_class, self.ridge)
        return self


class DRQLearner(_QEstimator):
    """Two-stage doubly robust Q-learner.

    Parameters
    ----------
    pi_e : StochasticPolicy
        Evaluation policy.
    gamma : float
        Discount factor.
    model_class : "tabular" or FeatureMap
        Second-stage model class.
    first_stage : estimator, optional
        Unfitted estimator for the first-stage Q; cloned per fold.
        Defaults to :class:`FittedQEvaluation` with the same model class.
    behavior_policy : policy, optional
        Oracle behavior policy. Estimated per fold when omitted.
    density_ratio : DensityRatioEstimate or callable
        Either a fixed estimate or ``callable(train_ds) -> DensityRatioEstimate``.
    n_folds : int
        Cross-fitting folds over episodes; 1 fits nuisances in sample.
    term2_mode, subsample_k, ridge, random_state
        See :class:`~drqlearn.drq.LossConfig`.

    Attributes
    ----------
    q_function_ : QFunction
    nuisances_ : list of NuisanceSet
        One per fold.
    folds_ : ndarray
        Fold label of every dataset row.
    """

    def __init__(self, pi_e=None, gamma=0.9, model_class="tabular", first_stage=None, behavior_policy=None,
                 density_ratio=None, smoothing=DEFAULT_SMOOTHING, n_folds=2, term2_mode="exact_marginal",
                 subsample_k=10, ridge=DEFAULT_RIDGE, random_state=0):
        self.pi_e = pi_e
        self.gamma = gamma
        self.model_class = model_class
        self.first_stage = first_stage
        self.behavior_policy = behavior_policy
        self.density_ratio = density_ratio
        self.smoothing = smoothing
        self.n_folds = n_folds
        self.term2_mode = term2_mode
        self.subsample_k = subsample_k
        self.ridge = ridge
        self.random_state = random_state

    def _first_stage(self):
        if self.first_stage is not None:
            return clone(self.first_stage)
        return FittedQEvaluation(self.pi_e, self.gamma, self.model_class)

    def _nuisances(self, train):
        if self.density_ratio is None:
            raise ParameterError("DRQLearner needs a density_ratio (estimate or callable)")
        w = self.density_ratio(train) if callable(self.density_ratio) else self.density_ratio
        if not isinstance(w, DensityRatioEstimate):
            w = DensityRatioEstimate(w)
        q1 = self._first_stage().fit(train).q_function_
        prov = {
            "pi_b": "estimated" if self.behavior_policy is None else "oracle",
            "w": "estimated" if callable(self.density_ratio) else "oracle",
            "q1": "estimated",
        }
        return NuisanceSet(_behavior(self.behavior_policy, train, self.smoothing), w, q1, prov)

    def fit(self, ds, y=None):
        cfg = LossConfig(self.term2_mode, self.subsample_k, self.n_folds, self.ridge, self.random_state)
        if self.n_folds == 1:
            self.folds_ = np.zeros(len(ds), dtype=np.int64)
            self.nuisances_ = [self._nuisances(ds)]
            ns = self.nuisances_[0]
        else:
            self.folds_ = episode_folds(ds, self.n_folds, self.random_state)
            self.nuisances_ = [self._nuisances(ds.subset(self.folds_ != k)) for k in range(self.n_folds)]
            ns = self.nuisances_
        self.q_function_ = fit_drq(ds, ns, self.pi_e, self.gamma, self.model_class, cfg)
        return self

"""Doubly robust, Neyman-orthogonal Q-function estimation for tabular MDPs."""

from .exceptions import DataError, DRQError, MetricError, NumericError, ParameterError, PositivityError
from .qfunction import FeatureMap, QFunction, TabularFeatures
from .policy import StochasticPolicy, epsilon_greedy, greedy_actions
from .mdp import (TabularMDP, exact_policy_q, make_chain_mdp, make_random_mdp, make_taxi_mdp,
                  value_iteration)
from .data import RewardNoise, TransitionDataset, read_dataset, sample_dataset, write_dataset
from .nuisance import (BehaviorPolicyEstimate, DensityRatioEstimate, NuisanceSet, corrupt,
                       estimate_behavior_policy, oracle_density_ratio, oracle_nuisances)
from .learners import fqe, mql, q_regression
from .drq import (LossConfig, NuisanceDirection, empirical_L3, fit_drq, fit_drq_population,
                  orthogonality_probe, population_L1, population_L3, td_error_zero_check)

__version__ = "0.1.0"

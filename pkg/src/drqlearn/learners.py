"""Plug-in Q-function learners: FQE, Q-regression and MQL.

Each takes a :class:`~drqlearn.data.TransitionDataset` and a model class
(``None``/``"tabular"`` or a :class:`~drqlearn.qfunction.FeatureMap`) and
returns a :class:`~drqlearn.qfunction.QFunction`.
"""

import numpy as np
import scipy.sparse

from ._linalg import PairSystem, accumulate, solve_moment_system
from .exceptions import NumericError, ParameterError
from .policy import ratio_table
from .qfunction import QFunction, resolve_model_class

DEFAULT_RIDGE = 1e-8
FQE_ITERATIONS = 50
TARGET_LIMIT = 1e12


def _probs(pi):
    return pi.probs if hasattr(pi, "probs") else np.asarray(pi)


def _next_values(q_table, probs_e, ds):
    v = np.einsum("sa,sa->s", probs_e, q_table)
    v[ds.terminal_mask] = 0.0
    return v[ds.s_next]


def fqe(ds, pi_e, gamma, fclass=None, iterations=FQE_ITERATIONS, ridge=DEFAULT_RIDGE, return_path=False):
    """Fitted Q evaluation from the zero function.

    Iterates ``g_{k+1} = argmin_g sum_i (R_i + gamma v_k(S~_i) - g(S_i, A_i))^2
    + ridge |theta|^2`` with ``v_k(s) = sum_a pi_e(a|s) g_k(s, a)`` and
    ``v_k = 0`` on terminal states.

    With ``return_path=True`` the list of all iterates is returned as well.
    """
    if iterations < 1:
        raise ParameterError("iterations must be at least 1")
    if ridge < 0:
        raise ParameterError("ridge must be non-negative")
    fmap = resolve_model_class(fclass, ds.n_states, ds.n_actions)
    probs_e = _probs(pi_e)
    W, _ = accumulate(ds.s, ds.a, np.ones(len(ds)), np.zeros(len(ds)), ds.n_states, ds.n_actions)
    system = PairSystem(fmap, W, ridge)
    q_table = np.zeros((ds.n_states, ds.n_actions))
    path = []
    for _ in range(iterations):
        targets = ds.r + gamma * _next_values(q_table, probs_e, ds)
        _, B = accumulate(ds.s, ds.a, np.ones(len(ds)), targets, ds.n_states, ds.n_actions)
        q = QFunction.from_params(fmap, system.solve(B))
        q_table = q.values()
        if return_path:
            path.append(q)
    return (q, path) if return_path else q


def _forward_by_step(ds, values, combine, init):
    """Apply ``out[t] = combine(out[t-1], values[t])`` along every episode."""
    out = np.empty(len(ds))
    first = ds.step == 0
    out[first] = init(values[first])
    for t in range(1, int(ds.step.max()) + 1 if len(ds) else 0):
        rows = np.flatnonzero(ds.step == t)
        out[rows] = combine(out[rows - 1], values[rows])
    return out


def discounted_ratio_returns(ds, ratios, gamma):
    """Per-visit targets ``Y_t = sum_{t'>=t} gamma^(t'-t) rho_{(t+1):t'} R_t'``.

    Computed by the backward recursion ``Y_t = R_t + gamma rho_{t+1} Y_{t+1}``
    within each episode.
    """
    Y = ds.r.astype(float).copy()
    if not len(ds):
        return Y
    for t in range(int(ds.step.max()) - 1, -1, -1):
        rows = np.flatnonzero(ds.step == t)
        nxt = rows + 1
        ok = nxt < len(ds)
        rows, nxt = rows[ok], nxt[ok]
        same = ds.episode_id[nxt] == ds.episode_id[rows]
        rows, nxt = rows[same], nxt[same]
        Y[rows] += gamma * ratios[nxt] * Y[nxt]
    return Y


def q_regression_targets(ds, pi_e, pi_b_hat, gamma):
    """Targets ``Y_{i,t}`` and weights ``gamma^t rho_{1:t}`` for Q-regression."""
    ratios = ratio_table(_probs(pi_e), _probs(pi_b_hat))[ds.s, ds.a]
    Y = discounted_ratio_returns(ds, ratios, gamma)
    cum = _forward_by_step(ds, ratios, lambda prev, cur: prev * cur, lambda v: np.ones_like(v))
    weights = gamma ** ds.step * cum
    if not (np.all(np.isfinite(Y)) and np.max(np.abs(Y), initial=0.0) <= TARGET_LIMIT):
        raise NumericError("importance-weighted returns exceed 1e12; the cumulative ratios blew up")
    if not (np.all(np.isfinite(weights)) and np.max(weights, initial=0.0) <= TARGET_LIMIT):
        raise NumericError("cumulative importance weights exceed 1e12")
    return Y, weights


def q_regression(ds, pi_e, pi_b_hat, gamma, fclass=None, ridge=DEFAULT_RIDGE):
    """IPTW regression of importance-weighted discounted returns on ``(S_t, A_t)``."""
    if ridge < 0:
        raise ParameterError("ridge must be non-negative")
    fmap = resolve_model_class(fclass, ds.n_states, ds.n_actions)
    Y, weights = q_regression_targets(ds, pi_e, pi_b_hat, gamma)
    # the 1/n factor is absorbed by normalising with the number of episodes
    weights = weights / max(ds.n_episodes, 1)
    W, B = accumulate(ds.s, ds.a, weights, Y, ds.n_states, ds.n_actions)
    return QFunction.from_params(fmap, PairSystem(fmap, W, ridge).solve(B))


def mql(ds, pi_e, pi_b_hat, gamma, fclass=None, ridge=DEFAULT_RIDGE):
    """Minimax Q-learning with test functions equal to the model features.

    For a linear (or tabular) class the minimax criterion is zero exactly at
    the solution of the importance-weighted moment equations
    ``sum_i rho_i (R_i + gamma v_g(S~_i) - g(S_i, A_i)) f(S_i, A_i) = 0``.
    """
    if ridge < 0:
        raise ParameterError("ridge must be non-negative")
    fmap = resolve_model_class(fclass, ds.n_states, ds.n_actions)
    S, A = ds.n_states, ds.n_actions
    probs_e = _probs(pi_e)
    rho = ratio_table(probs_e, _probs(pi_b_hat))[ds.s, ds.a] / max(len(ds), 1)
    W, R_sum = accumulate(ds.s, ds.a, rho, ds.r, S, A)
    C = scipy.sparse.csr_matrix((rho, (ds.s * A + ds.a, ds.s_next)), shape=(S * A, S))
    alive = (~ds.terminal_mask).astype(float)
    if fmap.is_tabular:
        rows = np.repeat(np.arange(S), A)
        cols = np.arange(S * A)
        vals = (probs_e * alive[:, None]).ravel()
        next_features = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(S, S * A))
    else:
        next_features = np.einsum("sa,sad->sd", probs_e, fmap.table) * alive[:, None]
    theta = solve_moment_system(fmap, W, C, next_features, R_sum, ridge, gamma)
    return QFunction.from_params(fmap, theta)

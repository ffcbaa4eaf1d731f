"""Stochastic policies and pointwise density ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError, PositivityError

ROW_TOL = 1e-12


@dataclass(frozen=True)
class StochasticPolicy:
    """Action probabilities ``probs[s, a] = pi(a | s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ParameterError("policy probabilities must be a matrix")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ParameterError("policy probabilities must be finite and non-negative")
        bad = np.abs(probs.sum(axis=1) - 1.0) > ROW_TOL
        if np.any(bad):
            raise ParameterError(f"policy rows {np.flatnonzero(bad)[:5].tolist()} do not sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self):
        return self.probs.shape[0]

    @property
    def n_actions(self):
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_unnormalized(cls, weights):
        weights = np.asarray(weights, dtype=float)
        return cls(weights / weights.sum(axis=1, keepdims=True))

    def __call__(self, s, a):
        return self.probs[s, a]


def greedy_actions(q):
    """Argmax action per state, ties broken towards the lowest index."""
    return np.argmax(np.asarray(q.values() if hasattr(q, "values") else q), axis=1)


def epsilon_greedy(q, epsilon):
    """Mix the greedy policy of ``q`` with the uniform policy.

    Each state puts ``1 - epsilon + epsilon/|A|`` on its argmax action and
    ``epsilon/|A|`` on every other action.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
    values = np.asarray(q.values() if hasattr(q, "values") else q)
    n_states, n_actions = values.shape
    probs = np.full((n_states, n_actions), epsilon / n_actions)
    probs[np.arange(n_states), greedy_actions(values)] += 1.0 - epsilon
    # exact row sums despite float accumulation
    probs /= probs.sum(axis=1, keepdims=True)
    return StochasticPolicy(probs)


def _ratio(pe, pb, s, a):
    if pb == 0.0:
        if pe == 0.0:
            return 0.0
        raise PositivityError(
            f"evaluation policy puts mass {pe:g} on (s={s}, a={a}) where the behavior policy has none",
            where=(int(s), int(a)),
        )
    return pe / pb


def action_ratio(pi_e, pi_b, s, a):
    """``pi_e(a|s) / pi_b(a|s)``, or 0 when both vanish."""
    pe = float(_probs(pi_e)[s, a])
    pb = float(_probs(pi_b)[s, a])
    return _ratio(pe, pb, s, a)


def ratio_table(pi_e, pi_b):
    """Vectorised :func:`action_ratio` over all pairs."""
    pe, pb = _probs(pi_e), _probs(pi_b)
    violating = (pb == 0) & (pe > 0)
    if np.any(violating):
        s, a = np.argwhere(violating)[0]
        raise PositivityError(
            f"evaluation policy puts mass on (s={s}, a={a}) where the behavior policy has none",
            where=(int(s), int(a)),
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pb > 0, pe / np.where(pb > 0, pb, 1.0), 0.0)


def cumulative_ratio(pi_e, pi_b, trajectory, l, t):
    """Product of action ratios over steps ``l..t`` (inclusive) of a trajectory.

    ``trajectory`` is a sequence of ``(state, action)`` pairs indexed by step.
    An empty range (``l > t``) gives 1.
    """
    if l > t + 1:
        raise ParameterError(f"need l <= t + 1, got l={l}, t={t}")
    if l > t:
        return 1.0
    if t >= len(trajectory):
        raise ParameterError(f"trajectory of length {len(trajectory)} has no step {t}")
    out = 1.0
    for k in range(l, t + 1):
        s, a = trajectory[k][0], trajectory[k][1]
        out *= action_ratio(pi_e, pi_b, s, a)
    return out


def _probs(pi):
    return pi.probs if hasattr(pi, "probs") else np.asarray(pi)

"""Tabular MDPs, built-in environments and exact dynamic-programming solvers."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, ParameterError
from .policy import StochasticPolicy
from .qfunction import QFunction

PROB_TOL = 1e-12
VI_MAX_SWEEPS = 100_000


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"gamma must lie strictly inside (0, 1), got {gamma}")


@dataclass(frozen=True)
class TabularMDP:
    """A finite discounted MDP with known model.

    Attributes
    ----------
    transition : ndarray of shape (n_states, n_actions, n_states)
        ``transition[s, a, s']`` is the probability of moving to ``s'``.
    reward : ndarray of shape (n_states, n_actions)
        Expected immediate reward.
    gamma : float
        Discount factor in (0, 1).
    initial_dist : ndarray of shape (n_states,)
        Distribution of the first state of an episode.
    terminal_mask : ndarray of bool, shape (n_states,)
        Absorbing episode-end states. They self-loop with zero reward.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    terminal_mask: np.ndarray | None = None
    name: str = "mdp"

    def __post_init__(self):
        _check_gamma(self.gamma)
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        mu = np.array(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ParameterError("transition must have shape (S, A, S)")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ParameterError(f"reward must have shape {(S, A)}, got {R.shape}")
        if mu.shape != (S,):
            raise ParameterError(f"initial_dist must have shape {(S,)}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > PROB_TOL):
            raise ParameterError("transition rows must be probability vectors")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > PROB_TOL:
            raise ParameterError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(R)):
            raise ParameterError("reward must be finite")
        term = np.zeros(S, dtype=bool) if self.terminal_mask is None else np.array(self.terminal_mask, dtype=bool)
        if term.shape != (S,):
            raise ParameterError("terminal_mask must have one entry per state")
        for s in np.flatnonzero(term):
            if not np.allclose(P[s, :, s], 1.0, atol=PROB_TOL, rtol=0) or np.any(R[s] != 0.0):
                raise ParameterError(f"terminal state {s} must self-loop with zero reward")
        for arr in (P, R, mu, term):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial_dist", mu)
        object.__setattr__(self, "terminal_mask", term)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def with_gamma(self, gamma):
        return TabularMDP(self.transition, self.reward, gamma, self.initial_dist, self.terminal_mask, self.name)

    def policy_transition(self, pi):
        """State-to-state kernel ``P_pi[s, s']`` under ``pi``."""
        return np.einsum("sa,sat->st", _probs(pi), self.transition)

    def policy_reward(self, pi):
        return np.einsum("sa,sa->s", _probs(pi), self.reward)


def _probs(pi):
    return pi.probs if isinstance(pi, StochasticPolicy) else np.asarray(pi)


# ---------------------------------------------------------------------------
# environments


def make_chain_mdp(n_states, slip, gamma):
    """Single-action chain that advances right with probability ``1 - slip``.

    The last state is absorbing and pays reward 1 on every step, every
    other state pays 0. Episodes start in state 0.
    """
    _check_gamma(gamma)
    if n_states < 1:
        raise ParameterError("n_states must be at least 1")
    if not 0.0 <= slip < 1.0:
        raise ParameterError(f"slip must lie in [0, 1), got {slip}")
    P = np.zeros((n_states, 1, n_states))
    for s in range(n_states - 1):
        P[s, 0, s + 1] = 1.0 - slip
        P[s, 0, s] += slip
    P[n_states - 1, 0, n_states - 1] = 1.0
    R = np.zeros((n_states, 1))
    R[n_states - 1, 0] = 1.0
    mu = np.zeros(n_states)
    mu[0] = 1.0
    return TabularMDP(P, R, gamma, mu, name=f"chain{n_states}")


def make_random_mdp(n_states, n_actions, gamma, seed):
    """Dirichlet(1) transitions, uniform [0, 1] rewards, uniform start."""
    _check_gamma(gamma)
    if n_states < 1 or n_actions < 1:
        raise ParameterError("sizes must be at least 1")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    mu = np.full(n_states, 1.0 / n_states)
    return TabularMDP(P, R, gamma, mu, name=f"random{n_states}x{n_actions}s{seed}")


TAXI_MAP = [
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
]
TAXI_LOCS = [(0, 0), (0, 4), (4, 0), (4, 3)]
TAXI_ACTIONS = ("south", "north", "east", "west", "pickup", "dropoff")
IN_TAXI = 4


def taxi_encode(row, col, pass_loc, dest):
    return ((row * 5 + col) * 5 + pass_loc) * 4 + dest


def taxi_decode(state):
    dest = state % 4
    state //= 4
    pass_loc = state % 5
    state //= 5
    return state // 5, state % 5, pass_loc, dest


def taxi_step(state, action):
    """Deterministic Taxi-v3 dynamics: ``(next_state, reward, done)``."""
    row, col, pass_loc, dest = taxi_decode(state)
    reward, done = -1.0, False
    taxi = (row, col)
    if action == 0:
        row = min(row + 1, 4)
    elif action == 1:
        row = max(row - 1, 0)
    elif action == 2 and TAXI_MAP[1 + row][2 * col + 2] == ":":
        col = min(col + 1, 4)
    elif action == 3 and TAXI_MAP[1 + row][2 * col] == ":":
        col = max(col - 1, 0)
    elif action == 4:
        if pass_loc < IN_TAXI and taxi == TAXI_LOCS[pass_loc]:
            pass_loc = IN_TAXI
        else:
            reward = -10.0
    elif action == 5:
        if taxi == TAXI_LOCS[dest] and pass_loc == IN_TAXI:
            pass_loc, done, reward = dest, True, 20.0
        elif taxi in TAXI_LOCS and pass_loc == IN_TAXI:
            pass_loc = TAXI_LOCS.index(taxi)
        else:
            reward = -10.0
    return taxi_encode(row, col, pass_loc, dest), reward, done


def make_taxi_mdp(gamma):
    """The 5x5 Taxi environment (500 states, 6 actions).

    States with the passenger already at the destination are the absorbing
    terminal states reached by a successful dropoff.
    """
    _check_gamma(gamma)
    S, A = 500, 6
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    terminal = np.zeros(S, dtype=bool)
    mu = np.zeros(S)
    for s in range(S):
        _, _, pass_loc, dest = taxi_decode(s)
        if pass_loc == dest:
            terminal[s] = True
            P[s, :, s] = 1.0
            continue
        if pass_loc < IN_TAXI:
            mu[s] = 1.0
        for a in range(A):
            nxt, r, _ = taxi_step(s, a)
            P[s, a, nxt] = 1.0
            R[s, a] = r
    mu /= mu.sum()
    return TabularMDP(P, R, gamma, mu, terminal, name="taxi")


# ---------------------------------------------------------------------------
# exact solvers


def bellman_backup(mdp, q_table, pi):
    """``r + gamma * P v`` with ``v = sum_a pi(a|.) q``."""
    v = np.einsum("sa,sa->s", _probs(pi), q_table)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def value_iteration(mdp, tol=1e-10):
    """Optimal Q by synchronous value iteration to sup-norm residual ``tol``."""
    if tol <= 0:
        raise ParameterError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(VI_MAX_SWEEPS):
        new = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        residual = np.max(np.abs(new - q))
        q = new
        if residual < tol * (1.0 - mdp.gamma):
            return QFunction.tabular(q)
    raise NumericError(f"value iteration did not converge in {VI_MAX_SWEEPS} sweeps")


def exact_policy_q(mdp, pi, tol=1e-10):
    """Q of ``pi`` by a direct solve of ``(I - gamma P_pi) v = r_pi``, then one backup."""
    probs = _probs(pi)
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ParameterError("policy shape does not match the MDP")
    system = np.eye(mdp.n_states) - mdp.gamma * mdp.policy_transition(probs)
    try:
        v = np.linalg.solve(system, mdp.policy_reward(probs))
    except np.linalg.LinAlgError as exc:
        raise NumericError("policy evaluation system is singular") from exc
    # absorbing zero-reward states have value exactly 0; drop solver rounding
    v[mdp.terminal_mask] = 0.0
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    residual = np.max(np.abs(q - bellman_backup(mdp, q, probs)))
    if not residual < tol * max(1.0, np.max(np.abs(q))):
        raise NumericError(f"Bellman residual {residual:.3g} exceeds tolerance {tol:g}")
    return QFunction.tabular(q)


def _occupancy_operator(mdp, pi):
    # (I - gamma P_pi)^{-1}
    system = np.eye(mdp.n_states) - mdp.gamma * mdp.policy_transition(pi)
    try:
        return np.linalg.inv(system)
    except np.linalg.LinAlgError as exc:
        raise NumericError("occupancy system is singular") from exc


def discounted_occupancy(mdp, pi, s0, a0):
    """``u(s') = sum_{t>=1} gamma^t P(S_t = s' | S_0 = s0, A_0 = a0)`` under ``pi``."""
    if not (0 <= s0 < mdp.n_states and 0 <= a0 < mdp.n_actions):
        raise ParameterError(f"invalid pair ({s0}, {a0})")
    one_step = mdp.transition[s0, a0]
    # u^T (I - gamma P) = gamma p1^T
    system = np.eye(mdp.n_states) - mdp.gamma * mdp.policy_transition(pi)
    return np.linalg.solve(system.T, mdp.gamma * one_step)


def occupancy_tensor(mdp, pi):
    """:func:`discounted_occupancy` for every ``(s0, a0)``, shape ``(S, A, S)``."""
    inv = _occupancy_operator(mdp, pi)
    return mdp.gamma * np.einsum("sat,tu->sau", mdp.transition, inv)


def behavior_state_distribution(mdp, pi, horizon=None):
    """Marginal distribution of transition origins under ``pi``.

    With ``horizon`` set, this is the expected share of steps spent in each
    non-terminal state during episodes of at most ``horizon`` steps started
    from ``initial_dist``. Without it the discounted visitation
    ``(1 - gamma) sum_t gamma^t mu P^t`` is used. Terminal states get zero
    mass either way.
    """
    P = mdp.policy_transition(pi)
    alive = ~mdp.terminal_mask
    if horizon is None:
        inv = _occupancy_operator(mdp, pi)
        d = (1.0 - mdp.gamma) * mdp.initial_dist @ inv
    else:
        if horizon < 1:
            raise ParameterError("horizon must be positive")
        d = np.zeros(mdp.n_states)
        mu = mdp.initial_dist * alive
        for _ in range(int(horizon)):
            d += mu
            mu = (mu @ P) * alive
    d = d * alive
    total = d.sum()
    if total <= 0:
        raise NumericError("behavior policy never visits a non-terminal state")
    return d / total


def reachable_states(mdp, pi):
    """States reachable from the support of ``initial_dist`` under ``pi``."""
    probs = _probs(pi)
    seen = np.zeros(mdp.n_states, dtype=bool)
    queue = deque(np.flatnonzero(mdp.initial_dist > 0).tolist())
    seen[list(queue)] = True
    while queue:
        s = queue.popleft()
        nxt = np.flatnonzero((probs[s] > 0) @ (mdp.transition[s] > 0))
        for t in nxt[~seen[nxt]]:
            seen[t] = True
            queue.append(int(t))
    return seen

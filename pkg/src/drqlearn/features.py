"""Linear feature maps for the linear model class."""

import numpy as np
import scipy.linalg

from .mdp import TAXI_LOCS, taxi_decode
from .qfunction import FeatureMap


def independent_columns(basis, rows=None, tol=1e-9):
    """Indices of a maximal linearly independent set of columns, in original order.

    Only ``rows`` (a boolean mask, default all) enter the rank decision.
    """
    basis = np.asarray(basis, dtype=float)
    sub = basis if rows is None else basis[rows]
    _, r, piv = scipy.linalg.qr(sub, pivoting=True, mode="economic")
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * max(diag[0], 1.0))) if diag.size else 0
    return np.sort(piv[:rank])


def action_product(state_basis, n_actions, terminal_mask=None, name="linear"):
    """Block features ``f(s, a) = e_a (x) phi(s)``, zero on terminal states.

    Columns that are linearly dependent on the non-terminal states are
    dropped so the normal equations stay full rank.
    """
    state_basis = np.asarray(state_basis, dtype=float)
    S = state_basis.shape[0]
    live = np.ones(S, dtype=bool) if terminal_mask is None else ~np.asarray(terminal_mask, dtype=bool)
    phi = state_basis[:, independent_columns(state_basis, live)]
    phi[~live] = 0.0
    k = phi.shape[1]
    table = np.zeros((S, n_actions, n_actions * k))
    for a in range(n_actions):
        table[:, a, a * k:(a + 1) * k] = phi
    return FeatureMap(table, name=name)


def taxi_relative_basis():
    """Per-state basis: intercept, one-hot row and column offsets to the current target, carrying flag.

    The target is the passenger's pick-up location while waiting and the
    destination while riding.
    """
    rows = []
    for s in range(500):
        row, col, pass_loc, dest = taxi_decode(s)
        riding = pass_loc == 4
        target_row, target_col = TAXI_LOCS[dest] if riding else TAXI_LOCS[min(pass_loc, 3)]
        x = np.zeros(1 + 9 + 9 + 1)
        x[0] = 1.0
        x[1 + target_row - row + 4] = 1.0
        x[10 + target_col - col + 4] = 1.0
        x[19] = float(riding)
        rows.append(x)
    return np.array(rows)


def taxi_features(mdp):
    """Linear Taxi feature map used by the linear-class benchmark presets."""
    return action_product(taxi_relative_basis(), mdp.n_actions, mdp.terminal_mask, name="taxi_relative")


def random_features(n_states, n_actions, d, seed=0):
    """Gaussian features, handy for small-MDP experiments."""
    table = np.random.default_rng(seed).standard_normal((n_states, n_actions, d))
    return FeatureMap(table, name=f"gaussian{d}")

"""Weighted least-squares and moment-system solvers over a model class.

Every loss handled here depends on the data only through per-pair
aggregates, so designs are accumulated on the ``(S, A)`` grid instead of
row by row.
"""

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .exceptions import NumericError

_RANK_TOL = 1e-12


def pair_index(states, actions, n_actions):
    return np.asarray(states) * n_actions + np.asarray(actions)


def accumulate(states, actions, weights, targets, n_states, n_actions):
    """Per-pair sums ``W = sum w`` and ``B = sum w * y``."""
    idx = pair_index(states, actions, n_actions)
    size = n_states * n_actions
    W = np.bincount(idx, weights=weights, minlength=size)
    B = np.bincount(idx, weights=np.asarray(weights) * np.asarray(targets), minlength=size)
    return W.reshape(n_states, n_actions), B.reshape(n_states, n_actions)


class PairSystem:
    """Normal equations of ``sum_sa W[s,a] (y - g(s,a))^2 + ridge |theta|^2``.

    The design depends only on ``W``, so it is factored once and reused for
    any right-hand side ``B`` (as FQE needs across iterations).
    """

    def __init__(self, fmap, W, ridge):
        self.fmap = fmap
        self.ridge = float(ridge)
        W = np.asarray(W, dtype=float)
        if fmap.is_tabular:
            den = W.ravel() + self.ridge
            if np.any(den <= 0):
                raise NumericError(
                    f"{int(np.sum(den <= 0))} state-action pairs carry no weight; "
                    "the normal equations are rank deficient, use ridge > 0"
                )
            self._den = den
        else:
            F = fmap.table.reshape(-1, fmap.d)
            gram = F.T @ (W.ravel()[:, None] * F)
            gram = 0.5 * (gram + gram.T) + self.ridge * np.eye(fmap.d)
            eig = np.linalg.eigvalsh(gram)
            if eig[0] <= _RANK_TOL * max(eig[-1], 1.0):
                raise NumericError("normal equations are rank deficient; use ridge > 0")
            self._chol = scipy.linalg.cho_factor(gram)
            self._F = F

    def solve(self, B):
        B = np.asarray(B, dtype=float).ravel()
        if self.fmap.is_tabular:
            return B / self._den
        return scipy.linalg.cho_solve(self._chol, self._F.T @ B)


def solve_pairs(fmap, W, B, ridge):
    return PairSystem(fmap, W, ridge).solve(B)


def solve_moment_system(fmap, W, C, next_features, R_sum, ridge, gamma):
    """Solve ``(sum rho f f^T - gamma sum rho f fbar'^T + ridge I) theta = sum rho f r``.

    Parameters
    ----------
    W : ndarray (S, A)
        Per-pair sums of the instrument weights.
    C : sparse matrix (S*A, S)
        ``C[(s,a), s']`` sums weights over rows with ``(S, A, S~) = (s, a, s')``.
    next_features : ndarray (S, d) or sparse (S, S*A)
        ``sum_a pi_e(a|s') f(s', a)``, zero on terminal ``s'``.
    R_sum : ndarray (S, A)
        Per-pair sums of weighted rewards.
    """
    SA = W.size
    if fmap.is_tabular:
        A = scipy.sparse.diags(W.ravel()) - gamma * (C @ next_features)
        A = A + ridge * scipy.sparse.identity(SA)
        A = scipy.sparse.csc_matrix(A)
        try:
            with np.errstate(all="raise"):
                lu = scipy.sparse.linalg.splu(A)
        except (RuntimeError, FloatingPointError) as exc:
            raise NumericError("moment system is singular; use ridge > 0") from exc
        theta = lu.solve(R_sum.ravel())
    else:
        F = fmap.table.reshape(SA, fmap.d)
        A = F.T @ (W.ravel()[:, None] * F) - gamma * F.T @ (C @ next_features)
        A = A + ridge * np.eye(fmap.d)
        try:
            theta = np.linalg.solve(A, F.T @ R_sum.ravel())
        except np.linalg.LinAlgError as exc:
            raise NumericError("moment system is singular; use ridge > 0") from exc
        if np.linalg.cond(A) > 1e14:
            raise NumericError("moment system is numerically singular; use ridge > 0")
    if not np.all(np.isfinite(theta)):
        raise NumericError("moment system produced non-finite parameters")
    return theta

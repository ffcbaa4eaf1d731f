"""Second-stage DR Q-learning: pseudo-outcomes, the orthogonal loss and its minimiser.

Both terms of the loss are quadratic in ``g``, so every evaluation and
every fit goes through a :class:`QuadraticLoss`, the per-pair aggregates
``(W, B, C)`` with ``loss(g) = sum W g^2 - 2 sum B g + C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._linalg import PairSystem
from .data import state_marginal
from .exceptions import ParameterError, PositivityError
from .mdp import behavior_state_distribution, exact_policy_q
from .nuisance import BehaviorPolicyEstimate, DensityRatioEstimate, NuisanceSet, oracle_nuisances
from .qfunction import QFunction, resolve_model_class

DEFAULT_EPS_GRID = (0.2, 0.1, 0.05, 0.025, 0.0125)


def _probs(pi):
    return pi.probs if hasattr(pi, "probs") else np.asarray(pi, dtype=float)


@dataclass(frozen=True)
class LossConfig:
    """Second-stage options.

    Parameters
    ----------
    term2_mode : {"exact_marginal", "subsample"}
        How the inner expectation over ``s ~ p_b`` is taken.
    subsample_k : int
        Draws of ``s`` per row in ``"subsample"`` mode.
    cross_fit_folds : int
        Number of episode folds; 1 disables sample splitting.
    ridge : float
        Tikhonov term on the model parameters.
    seed : int
        Seeds fold assignment and subsampling.
    """

    term2_mode: str = "exact_marginal"
    subsample_k: int = 10
    cross_fit_folds: int = 2
    ridge: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.term2_mode not in ("exact_marginal", "subsample"):
            raise ParameterError(f"unknown term2_mode {self.term2_mode!r}")
        if self.subsample_k < 1:
            raise ParameterError("subsample_k must be at least 1")
        if self.cross_fit_folds < 1:
            raise ParameterError("cross_fit_folds must be at least 1")
        if self.ridge < 0:
            raise ParameterError("ridge must be non-negative")


@dataclass(frozen=True)
class QuadraticLoss:
    """``loss(g) = sum_sa W g^2 - 2 sum_sa B g + C`` on the state-action grid."""

    W: np.ndarray
    B: np.ndarray
    C: float

    def __add__(self, other):
        return QuadraticLoss(self.W + other.W, self.B + other.B, self.C + other.C)

    def value(self, g):
        table = g.values() if isinstance(g, QFunction) else np.asarray(g, dtype=float)
        # a sum of squares, so clip the rounding residue below zero
        return max(float(np.sum(self.W * table**2) - 2.0 * np.sum(self.B * table) + self.C), 0.0)

    def minimize(self, fclass=None, ridge=0.0):
        S, A = self.W.shape
        fmap = resolve_model_class(fclass, S, A)
        return QFunction.from_params(fmap, PairSystem(fmap, self.W, ridge).solve(self.B))


@dataclass(frozen=True)
class PseudoOutcomeTables:
    """Row-level pseudo-outcomes of a dataset under one nuisance set.

    ``td[j]`` is the TD residual of row ``j`` under the first-stage Q,
    ``phi1[j, a]`` the first pseudo-outcome and ``weighted_td[j]`` the
    factor ``2 pi_e(A|S) / pi_b_hat(A|S) * td`` that multiplies the density
    ratio in the second one.
    """

    td: np.ndarray
    phi1: np.ndarray
    weighted_td: np.ndarray
    s_next: np.ndarray = field(repr=False)
    q1: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)

    def phi2(self, j, s, a):
        """Second pseudo-outcome of row(s) ``j`` at the pair ``(s, a)``."""
        j, s, a = np.asarray(j), np.asarray(s), np.asarray(a)
        return self.weighted_td[j] * self.w[s, a, self.s_next[j]] + self.q1[s, a]


def build_pseudo_outcomes(ds, ns, pi_e, gamma):
    """TD residuals and pseudo-outcomes of every row of ``ds``."""
    if (ns.n_states, ns.n_actions) != (ds.n_states, ds.n_actions):
        raise ParameterError("nuisance dimensions do not match the dataset")
    probs_e = _probs(pi_e)
    q1 = ns.q1_hat.values()
    v1 = np.einsum("sa,sa->s", probs_e, q1)
    v1[ds.terminal_mask] = 0.0
    td = ds.r + gamma * v1[ds.s_next] - q1[ds.s, ds.a]
    pb = ns.pi_b_hat.probs[ds.s, ds.a]
    if np.any(pb <= 0):
        j = int(np.flatnonzero(pb <= 0)[0])
        raise PositivityError(
            f"estimated behavior probability is 0 at observed pair (s={ds.s[j]}, a={ds.a[j]})",
            where=(int(ds.s[j]), int(ds.a[j])),
        )
    phi1 = q1[ds.s].copy()
    phi1[np.arange(len(ds)), ds.a] += 2.0 * td / pb
    weighted_td = 2.0 * probs_e[ds.s, ds.a] / pb * td
    return PseudoOutcomeTables(td, phi1, weighted_td, ds.s, q1, ns.w_hat.w)


def _fold_quadratic(ds, ns, probs_e, gamma, m_hat, n_total, cfg, rng):
    """Aggregates of the rows of ``ds``, normalised by the pooled size ``n_total``."""
    S, A = ds.n_states, ds.n_actions
    po = build_pseudo_outcomes(ds, ns, probs_e, gamma)
    # term 1: rows (S'_j, a) weighted by pi_e(a|S'_j) / N with target phi1
    counts = np.bincount(ds.s, minlength=S) / n_total
    phi1_sum = np.zeros((S, A))
    np.add.at(phi1_sum, ds.s, po.phi1)
    W1 = counts[:, None] * probs_e
    B1 = probs_e * phi1_sum / n_total
    C1 = float(np.sum(probs_e[ds.s] * po.phi1**2)) / n_total

    # term 2: pairs (s, a) weighted by m_hat(s) pi_e(a|s), target phi2 averaged over rows
    q1, w = po.q1, po.w
    frac = len(ds) / n_total
    if cfg.term2_mode == "exact_marginal":
        c1 = np.bincount(ds.s, weights=po.weighted_td, minlength=S) / n_total
        c2 = np.bincount(ds.s, weights=po.weighted_td**2, minlength=S) / n_total
        base = m_hat[:, None] * probs_e
        shift = w @ c1
        W2 = frac * base
        B2 = base * (frac * q1 + shift)
        C2 = float(np.sum(base * (frac * q1**2 + 2.0 * q1 * shift + (w**2) @ c2)))
    else:
        k = cfg.subsample_k
        W2 = np.zeros((S, A))
        B2 = np.zeros((S, A))
        C2 = 0.0
        cdf = np.cumsum(m_hat)
        cdf /= cdf[-1]
        for _ in range(k):
            draws = np.minimum(np.searchsorted(cdf, rng.random(len(ds)), side="right"), S - 1)
            phi2 = po.weighted_td[:, None] * w[draws, :, ds.s] + q1[draws]
            weight = probs_e[draws] / (n_total * k)
            np.add.at(W2, draws, weight)
            np.add.at(B2, draws, weight * phi2)
            C2 += float(np.sum(weight * phi2**2))
    return QuadraticLoss(W1 + W2, B1 + B2, C1 + C2)


def episode_folds(ds, n_folds, seed=0):
    """Fold label of every row; whole episodes go to one fold."""
    if n_folds < 1:
        raise ParameterError("n_folds must be at least 1")
    episodes, inverse = np.unique(ds.episode_id, return_inverse=True)
    if n_folds > 1 and episodes.size < n_folds:
        raise ParameterError(f"{episodes.size} episodes cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(episodes.size)
    labels = np.empty(episodes.size, dtype=np.int64)
    labels[perm] = np.arange(episodes.size) % n_folds
    return labels[inverse]


def _as_fold_list(ns, k):
    if isinstance(ns, NuisanceSet):
        return [ns] * k
    ns = list(ns)
    if len(ns) != k:
        raise ParameterError(f"expected {k} per-fold nuisance sets, got {len(ns)}")
    return ns


def empirical_quadratic(ds, ns, pi_e, gamma, cfg=None):
    """Pooled aggregates of the empirical loss.

    ``ns`` is either one :class:`NuisanceSet` applied to every row or a
    sequence with one set per fold of :func:`episode_folds` (``cfg.seed``).
    """
    cfg = cfg or LossConfig()
    probs_e = _probs(pi_e)
    m_hat = state_marginal(ds)
    rng = np.random.default_rng(cfg.seed)
    k = cfg.cross_fit_folds
    sets = _as_fold_list(ns, k) if not isinstance(ns, NuisanceSet) else [ns]
    if len(sets) == 1:
        return _fold_quadratic(ds, sets[0], probs_e, gamma, m_hat, len(ds), cfg, rng)
    folds = episode_folds(ds, k, cfg.seed)
    total = None
    for fold, fold_ns in enumerate(sets):
        part = _fold_quadratic(ds.subset(folds == fold), fold_ns, probs_e, gamma, m_hat, len(ds), cfg, rng)
        total = part if total is None else total + part
    return total


def empirical_L3(ds, ns, pi_e, gamma, g, cfg=None):
    """Value of the empirical orthogonal loss at ``g``."""
    return empirical_quadratic(ds, ns, pi_e, gamma, cfg).value(g)


def fit_drq(ds, ns, pi_e, gamma, fclass=None, cfg=None):
    """Minimise the empirical orthogonal loss over ``fclass`` by one linear solve."""
    cfg = cfg or LossConfig()
    return empirical_quadratic(ds, ns, pi_e, gamma, cfg).minimize(fclass, cfg.ridge)


# -- population (exact model) versions ---------------------------------------


def _population_parts(mdp, pi_e, pi_b, ns, p_b_state):
    probs_e, probs_b = _probs(pi_e), _probs(pi_b)
    p = behavior_state_distribution(mdp, pi_b) if p_b_state is None else np.asarray(p_b_state, dtype=float)
    if p.shape != (mdp.n_states,):
        raise ParameterError("p_b_state must be a vector over states")
    if (ns.n_states, ns.n_actions) != (mdp.n_states, mdp.n_actions):
        raise ParameterError("nuisance dimensions do not match the MDP")
    q1 = ns.q1_hat.values()
    v1 = np.einsum("sa,sa->s", probs_e, q1)
    v1[mdp.terminal_mask] = 0.0
    P = mdp.transition
    mean_td = mdp.reward + mdp.gamma * P @ v1 - q1
    # E[td^2 | s, a] with deterministic rewards
    residual = mdp.reward[:, :, None] + mdp.gamma * v1[None, None, :] - q1[:, :, None]
    td_sq = np.einsum("sat,sat->sa", P, residual**2)
    pb_hat = ns.pi_b_hat.probs
    live = probs_b > 0
    if np.any(live & (pb_hat <= 0)):
        raise PositivityError("estimated behavior probability is 0 where the behavior policy acts")
    inv = np.divide(1.0, pb_hat, out=np.zeros_like(pb_hat), where=pb_hat > 0)
    return probs_e, probs_b, p, q1, mean_td, td_sq, inv


def population_quadratic(mdp, pi_e, pi_b, ns, p_b_state=None):
    """Exact population aggregates of the orthogonal loss.

    Data rows are ``S ~ p_b_state``, ``A ~ pi_b``, ``R = r(S, A)`` and
    ``S~ ~ P(.|S, A)``; the inner state of the second term is an
    independent draw from ``p_b_state``. Rewards are taken as deterministic.
    """
    probs_e, probs_b, p, q1, mean_td, td_sq, inv = _population_parts(mdp, pi_e, pi_b, ns, p_b_state)
    base = p[:, None] * probs_e
    # term 1
    B1 = base * (q1 + 2.0 * probs_b * inv * mean_td)
    C1 = float(np.sum(base * q1**2)
               + np.sum(p[:, None] * probs_b * probs_e * (4.0 * td_sq * inv**2 + 4.0 * mean_td * q1 * inv)))
    # term 2
    ratio = probs_e * inv
    m1 = p * np.sum(probs_b * 2.0 * ratio * mean_td, axis=1)
    m2 = p * np.sum(probs_b * 4.0 * ratio**2 * td_sq, axis=1)
    w = ns.w_hat.w
    shift = w @ m1
    B2 = base * (q1 + shift)
    C2 = float(np.sum(base * (q1**2 + 2.0 * q1 * shift + (w**2) @ m2)))
    return QuadraticLoss(2.0 * base, B1 + B2, C1 + C2)


def population_L3(mdp, pi_e, pi_b, ns, g, p_b_state=None):
    """Exact population value of the orthogonal loss at ``g``."""
    return population_quadratic(mdp, pi_e, pi_b, ns, p_b_state).value(g)


def population_L1(mdp, pi_e, pi_b, ns, g, p_b_state=None):
    """Plug-in loss ``sum_s p_b(s) sum_a pi_e(a|s) (Q1(s,a) - g(s,a))^2``."""
    p = behavior_state_distribution(mdp, pi_b) if p_b_state is None else np.asarray(p_b_state, dtype=float)
    table = g.values() if isinstance(g, QFunction) else np.asarray(g, dtype=float)
    return float(np.sum(p[:, None] * _probs(pi_e) * (ns.q1_hat.values() - table) ** 2))


def fit_drq_population(mdp, pi_e, pi_b, ns, fclass=None, p_b_state=None, ridge=0.0):
    """Exact minimiser of the population loss over ``fclass``."""
    return population_quadratic(mdp, pi_e, pi_b, ns, p_b_state).minimize(fclass, ridge)


# -- diagnostics --------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceDirection:
    """Perturbation direction ``(d_pi_b, d_w, d_q1)``; unused parts are zero."""

    d_pi_b: np.ndarray
    d_w: np.ndarray
    d_q1: np.ndarray

    @classmethod
    def random(cls, ns, components=("pi_b", "w", "q1"), seed=0):
        """Random direction that keeps the perturbed nuisances valid for ``eps < 0.5``.

        The behavior-policy part is ``pi_b * (z - E_pi_b z)`` (rows sum to
        zero), the ratio part ``w * z'`` with ``z, z'`` uniform on ``[-1, 1]``
        and the Q part standard normal.
        """
        unknown = set(components) - {"pi_b", "w", "q1"}
        if unknown:
            raise ParameterError(f"unknown components {sorted(unknown)}")
        rng = np.random.default_rng(seed)
        pb, w, q = ns.pi_b_hat.probs, ns.w_hat.w, ns.q1_hat.values()
        z = rng.uniform(-1, 1, pb.shape)
        d_pi_b = pb * (z - np.sum(pb * z, axis=1, keepdims=True))
        d_w = w * rng.uniform(-1, 1, w.shape)
        d_q1 = rng.standard_normal(q.shape)
        return cls(
            d_pi_b if "pi_b" in components else np.zeros_like(pb),
            d_w if "w" in components else np.zeros_like(w),
            d_q1 if "q1" in components else np.zeros_like(q),
        )

    def is_zero(self):
        return not (np.any(self.d_pi_b) or np.any(self.d_w) or np.any(self.d_q1))

    def apply(self, ns, eps):
        probs = ns.pi_b_hat.probs + eps * self.d_pi_b
        if np.any(probs < 0):
            raise ParameterError("perturbation step leaves negative behavior probabilities")
        probs = probs / probs.sum(axis=1, keepdims=True)
        w = ns.w_hat.w + eps * self.d_w
        if np.any(w < 0):
            raise ParameterError("perturbation step leaves negative density ratios")
        return NuisanceSet(
            BehaviorPolicyEstimate(probs, ns.pi_b_hat.smoothing),
            DensityRatioEstimate(w),
            QFunction.tabular(ns.q1_hat.values() + eps * self.d_q1),
            {key: "corrupted(probe)" for key in ("pi_b", "w", "q1")},
        )


@dataclass(frozen=True)
class ProbeResult:
    eps: np.ndarray
    response: np.ndarray
    floor: float
    slope: float


def probe_response(mdp, pi_e, pi_b, direction, eps_grid=DEFAULT_EPS_GRID, loss="L3", p_b_state=None,
                   seed=0, step=1.0):
    """Directional derivative ``G(eps) = D_g loss(eta + eps d_eta, Q)[d_g]`` against ``eps``.

    ``G`` is taken by central differences in ``g`` with step ``step``
    (exact up to rounding because the loss is quadratic in ``g``). The
    response is ``|G(eps) - G(0)|``; ``floor`` is the rounding level of the
    differences, below which a response is indistinguishable from zero.
    ``slope`` is the log-log slope of the response, NaN when every point
    sits below the floor.
    """
    eps = np.asarray(eps_grid, dtype=float)
    if eps.ndim != 1 or eps.size < 4 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ParameterError("eps_grid must hold at least 4 positive, decreasing values")
    if direction.is_zero():
        raise ParameterError("perturbation direction is identically zero")
    if loss not in ("L3", "L1"):
        raise ParameterError(f"unknown loss {loss!r}")
    p = behavior_state_distribution(mdp, pi_b) if p_b_state is None else np.asarray(p_b_state, dtype=float)
    ns0 = oracle_nuisances(mdp, pi_e, pi_b, p_b_state=p)
    q_true = ns0.q1_hat.values()
    d_g = np.random.default_rng(seed + 7919).standard_normal(q_true.shape)
    magnitude = 0.0

    def derivative(ns):
        nonlocal magnitude
        if loss == "L3":
            quad = population_quadratic(mdp, pi_e, pi_b, ns, p)
            hi, lo = quad.value(q_true + step * d_g), quad.value(q_true - step * d_g)
        else:
            hi = population_L1(mdp, pi_e, pi_b, ns, q_true + step * d_g, p)
            lo = population_L1(mdp, pi_e, pi_b, ns, q_true - step * d_g, p)
        magnitude = max(magnitude, abs(hi), abs(lo))
        return (hi - lo) / (2.0 * step)

    g0 = derivative(ns0)
    response = np.array([abs(derivative(direction.apply(ns0, e)) - g0) for e in eps])
    floor = 1e3 * np.finfo(float).eps * max(magnitude, 1.0) / step
    if np.all(response <= floor):
        slope = float("nan")
    else:
        slope = float(np.polyfit(np.log(eps), np.log(np.maximum(response, floor)), 1)[0])
    return ProbeResult(eps, response, float(floor), slope)


def orthogonality_probe(mdp, pi_e, pi_b, direction, eps_grid=DEFAULT_EPS_GRID, loss="L3", p_b_state=None, seed=0):
    """Log-log slope of the loss-gradient response to a nuisance perturbation.

    About 2 for a Neyman-orthogonal loss along directions that reach second
    order, about 1 for a loss with first-order plug-in bias, and NaN when
    the response is zero to rounding precision.
    """
    return probe_response(mdp, pi_e, pi_b, direction, eps_grid, loss, p_b_state, seed).slope


def quasi_oracle_errors(mdp, pi_e, pi_b, eps_grid=(0.4, 0.2, 0.1, 0.05), p_b_state=None, seed=0):
    """Excess error of the population fit when both Q1 and w are off by ``eps``.

    Uses ``Q1 = Q + eps * d`` and ``w_hat = w * (1 + eps * u)`` with ``d``
    standard normal and ``u`` uniform on ``[-0.5, 0.5]``; the behavior
    policy stays exact. Returns ``(eps, errors, slope)`` where ``errors``
    is ``|g_hat - Q|^2`` weighted by ``p_b(s) pi_e(a|s)``.
    """
    eps = np.asarray(eps_grid, dtype=float)
    p = behavior_state_distribution(mdp, pi_b) if p_b_state is None else np.asarray(p_b_state, dtype=float)
    ns0 = oracle_nuisances(mdp, pi_e, pi_b, p_b_state=p)
    q_true = ns0.q1_hat.values()
    rng = np.random.default_rng(seed)
    d_q = rng.standard_normal(q_true.shape)
    u = rng.uniform(-0.5, 0.5, ns0.w_hat.w.shape)
    weight = p[:, None] * _probs(pi_e)
    errors = []
    for e in eps:
        ns = NuisanceSet(ns0.pi_b_hat, DensityRatioEstimate(ns0.w_hat.w * (1.0 + e * u)),
                         QFunction.tabular(q_true + e * d_q), ns0.provenance)
        g = fit_drq_population(mdp, pi_e, pi_b, ns, p_b_state=p).values()
        errors.append(float(np.sum(weight * (g - q_true) ** 2)))
    errors = np.array(errors)
    slope = float(np.polyfit(np.log(eps), np.log(errors), 1)[0])
    return eps, errors, slope


def td_error_zero_check(mdp, pi, pi_e, f, q=None, state_dist=None):
    """``|E[f(S, A) (R + gamma v(S~) - Q(S, A))]|`` under ``S ~ d, A ~ pi``.

    ``Q`` is the exact Q-function of ``pi_e`` unless ``q`` is given, ``v``
    its ``pi_e``-average (0 on terminal states) and ``d`` the discounted
    state distribution of ``pi`` unless ``state_dist`` is given.
    """
    probs, probs_e = _probs(pi), _probs(pi_e)
    q_table = exact_policy_q(mdp, pi_e).values() if q is None else (
        q.values() if isinstance(q, QFunction) else np.asarray(q, dtype=float))
    f = np.asarray(f, dtype=float)
    if f.shape != q_table.shape:
        raise ParameterError("weight function must be a table over (state, action)")
    d = behavior_state_distribution(mdp, pi) if state_dist is None else np.asarray(state_dist, dtype=float)
    v = np.einsum("sa,sa->s", probs_e, q_table)
    v[mdp.terminal_mask] = 0.0
    mean_td = mdp.reward + mdp.gamma * mdp.transition @ v - q_table
    return abs(float(np.sum(d[:, None] * probs * f * mean_td)))


__all__: Sequence[str] = [
    "LossConfig", "QuadraticLoss", "PseudoOutcomeTables", "NuisanceDirection", "ProbeResult",
    "build_pseudo_outcomes", "episode_folds", "empirical_quadratic", "empirical_L3", "fit_drq",
    "population_quadratic", "population_L3", "population_L1", "fit_drq_population",
    "probe_response", "orthogonality_probe", "quasi_oracle_errors", "td_error_zero_check",
]

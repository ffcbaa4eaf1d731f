"""First-stage nuisances: behavior policy, density ratio, first-stage Q."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ParameterError, PositivityError
from .mdp import behavior_state_distribution, exact_policy_q, occupancy_tensor
from .policy import StochasticPolicy
from .qfunction import QFunction

DEFAULT_SMOOTHING = 0.5


@dataclass(frozen=True)
class BehaviorPolicyEstimate:
    probs: np.ndarray
    smoothing: float = 0.0

    def __post_init__(self):
        probs = StochasticPolicy(self.probs).probs
        if self.smoothing < 0:
            raise ParameterError("smoothing must be non-negative")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_policy(cls, pi):
        return cls(pi.probs if hasattr(pi, "probs") else pi, 0.0)

    def as_policy(self):
        return StochasticPolicy(self.probs)


@dataclass(frozen=True)
class DensityRatioEstimate:
    """``w[s, a, s']`` approximating the discounted occupancy ratio of ``s'`` from ``(s, a)``."""

    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 3 or w.shape[0] != w.shape[2]:
            raise ParameterError("density ratio must have shape (S, A, S)")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("density ratio entries must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class NuisanceSet:
    """The first-stage triple consumed by the second stage.

    ``provenance`` maps each of ``"pi_b"``, ``"w"``, ``"q1"`` to
    ``"oracle"``, ``"estimated"`` or ``"corrupted(<description>)"``.
    """

    pi_b_hat: BehaviorPolicyEstimate
    w_hat: DensityRatioEstimate
    q1_hat: QFunction
    provenance: dict = field(default_factory=lambda: {"pi_b": "estimated", "w": "estimated", "q1": "estimated"})

    def __post_init__(self):
        S, A = self.pi_b_hat.probs.shape
        if self.w_hat.w.shape != (S, A, S):
            raise ParameterError(f"density ratio shape {self.w_hat.w.shape} does not match {(S, A, S)}")
        if self.q1_hat.shape != (S, A):
            raise ParameterError(f"first-stage Q shape {self.q1_hat.shape} does not match {(S, A)}")

    @property
    def n_states(self):
        return self.pi_b_hat.probs.shape[0]

    @property
    def n_actions(self):
        return self.pi_b_hat.probs.shape[1]


def estimate_behavior_policy(ds, smoothing=DEFAULT_SMOOTHING):
    """Smoothed empirical action frequencies per state.

    ``(count(s, a) + smoothing) / (count(s) + smoothing * |A|)``; states that
    never occur get a uniform row.
    """
    if smoothing < 0:
        raise ParameterError("smoothing must be non-negative")
    counts = np.zeros((ds.n_states, ds.n_actions))
    np.add.at(counts, (ds.s, ds.a), 1.0)
    totals = counts.sum(axis=1, keepdims=True) + smoothing * ds.n_actions
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = (counts + smoothing) / totals
    probs[totals[:, 0] == 0] = 1.0 / ds.n_actions
    return BehaviorPolicyEstimate(probs, float(smoothing))


def oracle_density_ratio(mdp, pi_e, pi_b, p_b_state=None, unvisited="raise"):
    """Exact ``w[s, a, s'] = u_e(s' | s, a) / p_b(s')`` from the known model.

    ``u_e`` is the discounted future occupancy under ``pi_e`` (see
    :func:`~drqlearn.mdp.occupancy_tensor`). ``p_b_state`` defaults to the
    discounted behavior state distribution of ``pi_b``. Terminal states
    never originate a transition, so their columns are set to 0.

    With ``unvisited="zero"``, non-terminal states with ``p_b(s') = 0`` also
    get 0 instead of raising; such states are never evaluated by losses
    built from data with the same marginal.
    """
    if unvisited not in ("raise", "zero"):
        raise ParameterError(f"unvisited must be 'raise' or 'zero', got {unvisited!r}")
    if p_b_state is None:
        p_b_state = behavior_state_distribution(mdp, pi_b)
    p = np.asarray(p_b_state, dtype=float)
    if p.shape != (mdp.n_states,) or np.any(p < 0):
        raise ParameterError("p_b_state must be a non-negative vector over states")
    u = occupancy_tensor(mdp, pi_e)
    u[:, :, mdp.terminal_mask] = 0.0
    u = np.maximum(u, 0.0)
    zero = p <= 0
    if unvisited == "raise":
        mass = u[:, :, zero].max(axis=(0, 1)) if zero.any() else np.array([])
        bad = np.flatnonzero(zero)[mass > 1e-15] if zero.any() else []
        if len(bad):
            raise PositivityError(
                f"state s'={bad[0]} has future occupancy under the evaluation policy "
                "but zero behavior probability",
                where=int(bad[0]),
            )
    w = np.divide(u, p, out=np.zeros_like(u), where=~zero)
    return DensityRatioEstimate(w)


def oracle_nuisances(mdp, pi_e, pi_b, q1=None, p_b_state=None, unvisited="raise"):
    """All-oracle :class:`NuisanceSet`; ``q1`` defaults to the exact Q of ``pi_e``."""
    if q1 is None:
        q1 = exact_policy_q(mdp, pi_e)
        q1_prov = "oracle"
    else:
        q1_prov = "estimated"
    return NuisanceSet(
        BehaviorPolicyEstimate.from_policy(pi_b),
        oracle_density_ratio(mdp, pi_e, pi_b, p_b_state, unvisited=unvisited),
        q1,
        {"pi_b": "oracle", "w": "oracle", "q1": q1_prov},
    )


_COMPONENTS = {"pi_b": "pi_b_hat", "w": "w_hat", "q1": "q1_hat"}


def corrupt(ns, which, mode, c=0.0):
    """Return a copy of ``ns`` with one component perturbed.

    Parameters
    ----------
    which : {"pi_b", "w", "q1"}
    mode : {"additive_bias", "multiplicative", "uniform_replace"}
        ``additive_bias`` adds ``c`` to every entry, ``multiplicative``
        scales every entry by ``c``, ``uniform_replace`` replaces the
        component by a constant (uniform rows for ``pi_b``, the mean
        value for ``w`` and ``q1``). Behavior-policy rows are renormalised
        afterwards.
    """
    if which not in _COMPONENTS:
        raise ParameterError(f"unknown nuisance component {which!r}")
    if mode not in ("additive_bias", "multiplicative", "uniform_replace"):
        raise ParameterError(f"unknown corruption mode {mode!r}")
    if which == "pi_b":
        probs = ns.pi_b_hat.probs
        if mode == "additive_bias":
            new = probs + c
        elif mode == "multiplicative":
            new = probs * c
        else:
            new = np.ones_like(probs)
        sums = new.sum(axis=1, keepdims=True)
        if np.any(new < 0) or np.any(sums <= 0):
            raise ParameterError("corruption leaves invalid behavior probabilities")
        component = BehaviorPolicyEstimate(new / sums, ns.pi_b_hat.smoothing)
    elif which == "w":
        w = ns.w_hat.w
        if mode == "additive_bias":
            new = w + c
        elif mode == "multiplicative":
            new = w * c
        else:
            new = np.full_like(w, w.mean())
        if np.any(new < 0):
            raise ParameterError("corruption produces negative density ratios")
        component = DensityRatioEstimate(new)
    else:
        q = ns.q1_hat.values()
        if mode == "additive_bias":
            new = q + c
        elif mode == "multiplicative":
            new = q * c
        else:
            new = np.full_like(q, q.mean())
        component = QFunction.tabular(new)
    label = mode if mode == "uniform_replace" else f"{mode}({c:g})"
    provenance = dict(ns.provenance)
    provenance[which] = f"corrupted({label})"
    return replace(ns, **{_COMPONENTS[which]: component, "provenance": provenance})

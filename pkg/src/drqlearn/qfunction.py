"""State-action value models and the feature maps that define model classes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError


class FeatureMap:
    """A deterministic linear feature map ``(s, a) -> R^d``.

    The map is stored as a dense lookup table of shape
    ``(n_states, n_actions, d)`` so evaluation is an indexing operation.

    Parameters
    ----------
    table : ndarray of shape (n_states, n_actions, d)
        Feature vectors for every state-action pair.
    name : str
        Label used in result files and configs.
    """

    is_tabular = False

    def __init__(self, table, name="linear"):
        table = np.array(table, dtype=float)
        if table.ndim != 3:
            raise ParameterError("feature table must have shape (n_states, n_actions, d)")
        if not np.all(np.isfinite(table)):
            raise ParameterError("feature table contains non-finite entries")
        table.setflags(write=False)
        self.table = table
        self.name = name

    @property
    def n_states(self):
        return self.table.shape[0]

    @property
    def n_actions(self):
        return self.table.shape[1]

    @property
    def d(self):
        return self.table.shape[2]

    @property
    def bound(self):
        """Largest absolute feature entry."""
        return float(np.abs(self.table).max()) if self.table.size else 0.0

    def features(self, s, a):
        return self.table[s, a]

    def design(self, states, actions):
        """Stack feature rows for paired index arrays."""
        return self.table[np.asarray(states), np.asarray(actions)]

    def __repr__(self):
        return f"FeatureMap(name={self.name!r}, n_states={self.n_states}, n_actions={self.n_actions}, d={self.d})"


class TabularFeatures(FeatureMap):
    """One-hot features over state-action pairs, kept implicit.

    Solvers special-case this class and never materialise the
    ``(S*A) x (S*A)`` design.
    """

    is_tabular = True

    def __init__(self, n_states, n_actions):
        if n_states < 1 or n_actions < 1:
            raise ParameterError("n_states and n_actions must be positive")
        self._shape = (int(n_states), int(n_actions))
        self.name = "tabular"

    @property
    def table(self):
        raise AttributeError("tabular features are implicit; use features(s, a)")

    @property
    def n_states(self):
        return self._shape[0]

    @property
    def n_actions(self):
        return self._shape[1]

    @property
    def d(self):
        return self._shape[0] * self._shape[1]

    @property
    def bound(self):
        return 1.0

    def features(self, s, a):
        out = np.zeros(self.d)
        out[s * self.n_actions + a] = 1.0
        return out

    def design(self, states, actions):
        states = np.asarray(states)
        out = np.zeros((states.size, self.d))
        out[np.arange(states.size), states * self.n_actions + np.asarray(actions)] = 1.0
        return out

    def __repr__(self):
        return f"TabularFeatures(n_states={self.n_states}, n_actions={self.n_actions})"


def resolve_model_class(fclass, n_states, n_actions):
    """Turn ``None``/``"tabular"``/FeatureMap into a FeatureMap instance."""
    if fclass is None or (isinstance(fclass, str) and fclass == "tabular"):
        return TabularFeatures(n_states, n_actions)
    if isinstance(fclass, FeatureMap):
        if (fclass.n_states, fclass.n_actions) != (n_states, n_actions):
            raise ParameterError(
                f"feature map covers {fclass.n_states}x{fclass.n_actions} pairs, "
                f"expected {n_states}x{n_actions}"
            )
        return fclass
    raise ParameterError(f"unknown model class {fclass!r}")


@dataclass(frozen=True)
class QFunction:
    """A state-action value function.

    ``kind`` is ``"tabular"`` (``table`` holds the values) or ``"linear"``
    (``weights`` against ``feature_map``).
    """

    kind: str
    table: np.ndarray | None = None
    weights: np.ndarray | None = None
    feature_map: FeatureMap | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "tabular":
            if self.table is None or np.ndim(self.table) != 2:
                raise ParameterError("tabular QFunction needs a 2-d table")
            table = np.array(self.table, dtype=float)
            table.setflags(write=False)
            object.__setattr__(self, "table", table)
        elif self.kind == "linear":
            if self.weights is None or self.feature_map is None:
                raise ParameterError("linear QFunction needs weights and a feature map")
            weights = np.array(self.weights, dtype=float).ravel()
            if weights.size != self.feature_map.d:
                raise ParameterError(
                    f"weights have length {weights.size}, feature map has d={self.feature_map.d}"
                )
            weights.setflags(write=False)
            object.__setattr__(self, "weights", weights)
        else:
            raise ParameterError(f"unknown QFunction kind {self.kind!r}")

    @classmethod
    def tabular(cls, table):
        return cls(kind="tabular", table=table)

    @classmethod
    def from_params(cls, fmap, params):
        """Wrap solver parameters for ``fmap`` as a QFunction."""
        if fmap.is_tabular:
            return cls.tabular(np.asarray(params, dtype=float).reshape(fmap.n_states, fmap.n_actions))
        return cls(kind="linear", weights=params, feature_map=fmap)

    @property
    def shape(self):
        if self.kind == "tabular":
            return self.table.shape
        return (self.feature_map.n_states, self.feature_map.n_actions)

    def values(self):
        """Full ``(n_states, n_actions)`` value table."""
        if self.kind == "tabular":
            return self.table
        return self.feature_map.table @ self.weights

    def __call__(self, s, a):
        if self.kind == "tabular":
            return self.table[s, a]
        return self.feature_map.design(s, a) @ self.weights

    def state_values(self, probs, terminal_mask=None):
        """``v(s) = sum_a pi(a|s) Q(s, a)``; zero on terminal states if a mask is given."""
        v = np.einsum("sa,sa->s", probs, self.values())
        if terminal_mask is not None:
            v = np.where(terminal_mask, 0.0, v)
        return v

    def shifted(self, offset):
        """Tabular copy with ``offset`` (scalar or table) added."""
        return QFunction.tabular(self.values() + offset)

"""Behavior-policy trajectory sampling and one-step transition datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import DataError, ParameterError

CSV_HEADER = ("episode_id", "step", "s", "a", "r", "s_next")


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    episode_id: int
    step: int


@dataclass(frozen=True)
class RewardNoise:
    """Sampling law of rewards around their conditional mean."""

    kind: str = "deterministic"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("deterministic", "gaussian"):
            raise ParameterError(f"unknown reward noise {self.kind!r}")
        if self.sigma < 0:
            raise ParameterError("sigma must be non-negative")

    @classmethod
    def gaussian(cls, sigma):
        return cls("gaussian", float(sigma))

    def sample(self, mean, rng):
        if self.kind == "deterministic" or self.sigma == 0.0:
            return np.asarray(mean, dtype=float)
        return mean + self.sigma * rng.standard_normal(np.shape(mean))


class TransitionDataset:
    """Columnar store of one-step transitions ``(S, A, R, S~)``.

    Rows are ordered by episode then step. ``terminal_mask`` marks the
    absorbing states of the generating MDP so learners can zero the
    bootstrap value after a genuine episode end.
    """

    def __init__(self, episode_id, step, s, a, r, s_next, *, n_states, n_actions,
                 terminal_mask=None, n_episodes=None, max_steps=None, seed=None):
        cols = {
            "episode_id": np.asarray(episode_id, dtype=np.int64),
            "step": np.asarray(step, dtype=np.int64),
            "s": np.asarray(s, dtype=np.int64),
            "a": np.asarray(a, dtype=np.int64),
            "r": np.asarray(r, dtype=float),
            "s_next": np.asarray(s_next, dtype=np.int64),
        }
        sizes = {v.shape for v in cols.values()}
        if len(sizes) != 1 or len(next(iter(sizes))) != 1:
            raise DataError("dataset columns must be 1-d and of equal length")
        for name, col in cols.items():
            col.setflags(write=False)
            setattr(self, name, col)
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        term = np.zeros(self.n_states, dtype=bool) if terminal_mask is None else np.asarray(terminal_mask, dtype=bool)
        term.setflags(write=False)
        self.terminal_mask = term
        self.n_episodes = int(n_episodes) if n_episodes is not None else int(np.unique(self.episode_id).size)
        self.max_steps = max_steps
        self.seed = seed
        if len(self) and (self.s.max() >= self.n_states or self.s_next.max() >= self.n_states
                          or self.a.max() >= self.n_actions or self.s.min() < 0 or self.a.min() < 0):
            raise DataError("state or action index out of range")

    def __len__(self):
        return self.s.size

    def __iter__(self):
        return iter(self.transitions)

    @property
    def transitions(self):
        return [Transition(*row) for row in zip(self.s.tolist(), self.a.tolist(), self.r.tolist(),
                                                 self.s_next.tolist(), self.episode_id.tolist(),
                                                 self.step.tolist())]

    @property
    def next_is_terminal(self):
        return self.terminal_mask[self.s_next]

    def episode_bounds(self):
        """``(start, stop)`` row slices of each episode, in row order."""
        if not len(self):
            return []
        cut = np.flatnonzero(np.diff(self.episode_id) != 0) + 1
        starts = np.concatenate([[0], cut])
        stops = np.concatenate([cut, [len(self)]])
        return list(zip(starts.tolist(), stops.tolist()))

    def subset(self, mask):
        """Dataset restricted to the rows selected by ``mask``."""
        return TransitionDataset(
            self.episode_id[mask], self.step[mask], self.s[mask], self.a[mask], self.r[mask],
            self.s_next[mask], n_states=self.n_states, n_actions=self.n_actions,
            terminal_mask=self.terminal_mask, max_steps=self.max_steps, seed=self.seed,
        )

    def check_stitching(self):
        """Raise :class:`DataError` unless episodes chain step by step."""
        for start, stop in self.episode_bounds():
            steps = self.step[start:stop]
            if steps[0] != 0 or np.any(np.diff(steps) != 1):
                raise DataError(f"episode {self.episode_id[start]} steps are not consecutive from 0")
            if np.any(self.s_next[start:stop - 1] != self.s[start + 1:stop]):
                raise DataError(f"episode {self.episode_id[start]} breaks s_next chaining")
        if np.any(self.terminal_mask[self.s]):
            raise DataError("transition originates from a terminal state")

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CSV_HEADER)

    def __repr__(self):
        return (f"TransitionDataset(n_transitions={len(self)}, n_episodes={self.n_episodes}, "
                f"n_states={self.n_states}, n_actions={self.n_actions})")


def _categorical(rng, cdf_rows):
    u = rng.random(cdf_rows.shape[0])
    idx = (cdf_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_dataset(mdp, pi_b, n_episodes, max_steps, noise=None, seed=0):
    """Roll out ``n_episodes`` episodes of ``pi_b`` in ``mdp``.

    Episodes start from ``mdp.initial_dist`` and stop on entering a terminal
    state or after ``max_steps`` transitions. All randomness comes from one
    generator seeded with ``seed``.
    """
    if n_episodes < 1 or max_steps < 1:
        raise ParameterError("n_episodes and max_steps must be at least 1")
    noise = noise or RewardNoise()
    probs = pi_b.probs if hasattr(pi_b, "probs") else np.asarray(pi_b)
    rng = np.random.default_rng(seed)
    pi_cdf = np.cumsum(probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    mu_cdf = np.cumsum(mdp.initial_dist)

    state = _categorical(rng, np.broadcast_to(mu_cdf, (n_episodes, mdp.n_states)))
    active = ~mdp.terminal_mask[state]
    records = []
    for t in range(max_steps):
        action = _categorical(rng, pi_cdf[state])
        reward = noise.sample(mdp.reward[state, action], rng)
        nxt = _categorical(rng, p_cdf[state, action])
        idx = np.flatnonzero(active)
        records.append((idx, np.full(idx.size, t), state[idx], action[idx], reward[idx], nxt[idx]))
        active = active & ~mdp.terminal_mask[nxt]
        state = nxt
        if not active.any():
            break
    cols = [np.concatenate(c) for c in zip(*records)]
    order = np.lexsort((cols[1], cols[0]))
    ep, step, s, a, r, s_next = (c[order] for c in cols)
    return TransitionDataset(ep, step, s, a, r, s_next, n_states=mdp.n_states, n_actions=mdp.n_actions,
                             terminal_mask=mdp.terminal_mask, n_episodes=n_episodes,
                             max_steps=max_steps, seed=seed)


def state_marginal(ds):
    """Empirical frequency of transition origins."""
    if len(ds) == 0:
        raise DataError("state marginal of an empty dataset")
    return np.bincount(ds.s, minlength=ds.n_states) / len(ds)


def write_dataset(ds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in zip(ds.episode_id.tolist(), ds.step.tolist(), ds.s.tolist(), ds.a.tolist(),
                       ds.r.tolist(), ds.s_next.tolist()):
            writer.writerow((row[0], row[1], row[2], row[3], repr(row[4]), row[5]))


def read_dataset(path, n_states, n_actions, terminal_mask=None):
    """Load a dataset written by :func:`write_dataset`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise DataError(f"unexpected header {header!r}")
        rows = list(reader)
    if not rows:
        cols = [[] for _ in CSV_HEADER]
    else:
        cols = list(zip(*rows))
    return TransitionDataset(
        [int(x) for x in cols[0]], [int(x) for x in cols[1]], [int(x) for x in cols[2]],
        [int(x) for x in cols[3]], [float(x) for x in cols[4]], [int(x) for x in cols[5]],
        n_states=n_states, n_actions=n_actions, terminal_mask=terminal_mask,
    )

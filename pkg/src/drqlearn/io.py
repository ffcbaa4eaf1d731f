"""JSON documents for models, policies and nuisances; CSV tables for Q-functions."""

import csv
import json

import numpy as np

from .exceptions import DataError
from .mdp import TabularMDP
from .nuisance import BehaviorPolicyEstimate, DensityRatioEstimate, NuisanceSet
from .policy import StochasticPolicy
from .qfunction import QFunction

Q_HEADER = ("s", "a", "value")


def _dump(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _load(path, kind):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != kind:
        raise DataError(f"{path} holds {doc.get('kind')!r}, expected {kind!r}")
    return doc


def mdp_to_dict(mdp):
    return {
        "kind": "mdp",
        "name": mdp.name,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
        "terminal_mask": mdp.terminal_mask.tolist(),
    }


def mdp_from_dict(doc):
    return TabularMDP(np.array(doc["transition"]), np.array(doc["reward"]), doc["gamma"],
                      np.array(doc["initial_dist"]), np.array(doc["terminal_mask"], dtype=bool), doc["name"])


def save_mdp(mdp, path):
    _dump(mdp_to_dict(mdp), path)


def load_mdp(path):
    return mdp_from_dict(_load(path, "mdp"))


def save_policy(pi, path):
    _dump({"kind": "policy", "probs": pi.probs.tolist()}, path)


def load_policy(path):
    return StochasticPolicy(np.array(_load(path, "policy")["probs"]))


def save_nuisances(ns, path):
    """Write a :class:`NuisanceSet` so a second stage can be replayed later."""
    _dump({
        "kind": "nuisances",
        "pi_b_hat": ns.pi_b_hat.probs.tolist(),
        "smoothing": ns.pi_b_hat.smoothing,
        "w_hat": ns.w_hat.w.tolist(),
        "q1_hat": ns.q1_hat.values().tolist(),
        "provenance": ns.provenance,
    }, path)


def load_nuisances(path):
    doc = _load(path, "nuisances")
    return NuisanceSet(
        BehaviorPolicyEstimate(np.array(doc["pi_b_hat"]), doc["smoothing"]),
        DensityRatioEstimate(np.array(doc["w_hat"])),
        QFunction.tabular(np.array(doc["q1_hat"])),
        doc["provenance"],
    )


def write_q_table(q, path):
    """One ``s,a,value`` line per state-action pair."""
    table = q.values() if isinstance(q, QFunction) else np.asarray(q)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(Q_HEADER)
        for s in range(table.shape[0]):
            for a in range(table.shape[1]):
                writer.writerow((s, a, repr(float(table[s, a]))))


def read_q_table(path, n_states=None, n_actions=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != Q_HEADER:
            raise DataError(f"{path} is not an s,a,value table")
        rows = [(int(s), int(a), float(v)) for s, a, v in reader]
    if not rows:
        raise DataError(f"{path} has no rows")
    S = n_states or max(r[0] for r in rows) + 1
    A = n_actions or max(r[1] for r in rows) + 1
    table = np.full((S, A), np.nan)
    for s, a, v in rows:
        table[s, a] = v
    if np.isnan(table).any():
        raise DataError(f"{path} does not cover every state-action pair")
    return QFunction.tabular(table)

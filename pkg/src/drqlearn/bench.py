"""Benchmark harness: ground truth, the relative error metric, sweeps and result files."""

from __future__ import annotations

import csv
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .data import sample_dataset, state_marginal
from .estimators import DRQLearner, FittedQEvaluation, MinimaxQLearning, QRegression
from .exceptions import DRQError, MetricError, ParameterError
from .features import random_features, taxi_features
from .mdp import (behavior_state_distribution, exact_policy_q, make_chain_mdp, make_random_mdp, make_taxi_mdp,
                  reachable_states, value_iteration)
from .nuisance import oracle_density_ratio
from .policy import epsilon_greedy
from .qfunction import QFunction

METHODS = ("drq", "fqe", "q_regression", "mql")
SWEEP_PARAMS = ("n", "h", "eps_e")
DETAIL_HEADER = ("method", "seed", "sweep_param", "sweep_value", "rmse")
TIMING_HEADER = ("method", "seed", "sweep_param", "sweep_value", "wall_time_ms")
SUMMARY_HEADER = ("method", "sweep_param", "sweep_value", "n_runs", "n_failed", "mean_rmse", "se_rmse")
PANEL_HEADER = ("panel", "method", "sweep_param", "sweep_value", "n_runs", "mean_rmse", "se_rmse")

# default grids of the three sweeps
SWEEP_GRIDS = {
    "n": tuple(range(2000, 6001, 500)),
    "h": tuple(range(3, 21)),
    "eps_e": tuple(round(0.1 * k, 1) for k in range(1, 10)),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark run: an environment, a policy pair, methods, seeds and an optional sweep.

    ``env`` is ``"taxi"``, ``"chain(n)"`` or ``"random(n,a,seed)"``.
    ``fclass`` is ``"tabular"`` or ``"linear"``; the linear class uses the
    Taxi feature map on Taxi and ``features_dim`` Gaussian features
    elsewhere. ``sweep_param`` is one of ``n``, ``h`` (with
    ``gamma = 1 - 1/h``) or ``eps_e``.
    """

    env: str = "taxi"
    n_episodes: int = 3000
    max_steps: int = 100
    gamma: float = 0.9
    eps_b: float = 0.5
    eps_e: float = 0.1
    fclass: str = "tabular"
    features_dim: int = 8
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2, 3, 4)
    sweep_param: Optional[str] = None
    sweep_values: tuple = ()
    folds: int = 1
    support: str = "reachable"
    behavior: str = "oracle"
    smoothing: float = 0.5
    ratio_marginal: str = "population"
    chain_slip: float = 0.1
    ridge: float = 1e-8
    fqe_iterations: int = 50

    def __post_init__(self):
        parse_env(self.env)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("eps_b", "eps_e"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.n_episodes < 1 or self.max_steps < 1:
            raise ParameterError("n_episodes and max_steps must be positive")
        if not self.methods or set(self.methods) - set(METHODS):
            raise ParameterError(f"methods must be a non-empty subset of {METHODS}")
        if not self.seeds:
            raise ParameterError("at least one seed is required")
        if self.fclass not in ("tabular", "linear"):
            raise ParameterError(f"fclass must be 'tabular' or 'linear', got {self.fclass!r}")
        if self.sweep_param is not None:
            if self.sweep_param not in SWEEP_PARAMS:
                raise ParameterError(f"sweep param must be one of {SWEEP_PARAMS}")
            if not self.sweep_values:
                object.__setattr__(self, "sweep_values", SWEEP_GRIDS[self.sweep_param])
            for v in self.sweep_values:
                self.point(v)
        if self.support not in ("reachable", "all"):
            raise ParameterError("support must be 'reachable' or 'all'")
        if self.behavior not in ("oracle", "estimated"):
            raise ParameterError("behavior must be 'oracle' or 'estimated'")
        if self.ratio_marginal not in ("population", "empirical"):
            raise ParameterError("ratio_marginal must be 'population' or 'empirical'")
        if self.folds < 1:
            raise ParameterError("folds must be at least 1")

    def point(self, value):
        """Config at one sweep value."""
        if self.sweep_param is None or value is None:
            return self
        if self.sweep_param == "n":
            return replace(self, n_episodes=int(value), sweep_param=None, sweep_values=())
        if self.sweep_param == "h":
            if value <= 1:
                raise ParameterError(f"effective horizon must exceed 1, got {value}")
            return replace(self, gamma=1.0 - 1.0 / value, sweep_param=None, sweep_values=())
        return replace(self, eps_e=float(value), sweep_param=None, sweep_values=())

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        sweep = doc.pop("sweep", None)
        if sweep:
            doc["sweep_param"] = sweep.get("param")
            doc["sweep_values"] = tuple(sweep.get("values") or ())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        doc = asdict(self)
        doc["methods"], doc["seeds"] = list(self.methods), list(self.seeds)
        param, values = doc.pop("sweep_param"), doc.pop("sweep_values")
        if param is not None:
            doc["sweep"] = {"param": param, "values": list(values)}
        return doc


@dataclass(frozen=True)
class ResultRow:
    method: str
    seed: int
    sweep_param: str
    sweep_value: Optional[float]
    rmse: float
    wall_time_ms: int
    error: Optional[str] = field(default=None, compare=False)

    @property
    def failed(self):
        return self.error is not None


# -- configuration documents ----------------------------------------------------


def _set_path(doc, key, value):
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ParameterError(f"cannot set {key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def apply_overrides(doc, overrides):
    """Apply ``key=value`` strings in order (last wins); values are parsed as YAML scalars."""
    doc = dict(doc or {})
    if doc.get("sweep") is not None:
        doc["sweep"] = dict(doc["sweep"])
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ParameterError(f"override {item!r} is not of the form key=value")
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    return doc


def load_config_document(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is not None and not isinstance(doc, dict):
        raise ParameterError(f"{path} must hold a mapping")
    return doc or {}


def load_config(path=None, overrides=()):
    doc = load_config_document(path) if path else {}
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides))


# -- environments, truth and the metric -----------------------------------------


def parse_env(spec):
    """``"taxi"``, ``"chain(n)"`` or ``"random(n,a,seed)"`` to ``(kind, args)``."""
    m = re.fullmatch(r"\s*(taxi|chain|random)\s*(?:\(([^)]*)\))?\s*", str(spec))
    if not m:
        raise ParameterError(f"unknown environment {spec!r}")
    kind, raw = m.group(1), m.group(2)
    args = tuple(int(x) for x in raw.split(",")) if raw and raw.strip() else ()
    expected = {"taxi": (0,), "chain": (0, 1), "random": (0, 2, 3)}[kind]
    if len(args) not in expected:
        raise ParameterError(f"environment {spec!r} has the wrong number of arguments")
    return kind, args


def build_env(cfg):
    kind, args = parse_env(cfg.env)
    if kind == "taxi":
        return make_taxi_mdp(cfg.gamma)
    if kind == "chain":
        return make_chain_mdp(args[0] if args else 5, cfg.chain_slip, cfg.gamma)
    n, a = args[:2] if args else (5, 3)
    seed = args[2] if len(args) > 2 else 0
    return make_random_mdp(n, a, cfg.gamma, seed)


def build_model_class(cfg, mdp):
    if cfg.fclass == "tabular":
        return "tabular"
    if parse_env(cfg.env)[0] == "taxi":
        return taxi_features(mdp)
    return random_features(mdp.n_states, mdp.n_actions, cfg.features_dim, seed=0)


def support_mask(mdp, pi_b, kind="reachable"):
    """State-action pairs over which the error is measured.

    ``"reachable"`` keeps every action at non-terminal states reachable
    under ``pi_b``; ``"all"`` keeps every pair.
    """
    if kind == "all":
        return np.ones((mdp.n_states, mdp.n_actions), dtype=bool)
    if kind != "reachable":
        raise ParameterError(f"unknown support {kind!r}")
    states = reachable_states(mdp, pi_b) & ~mdp.terminal_mask
    return np.repeat(states[:, None], mdp.n_actions, axis=1)


def rmse(q_hat, q_true, support=None):
    """Relative squared error ``sum (q_hat - q)^2 / sum q^2`` over ``support``."""
    est = q_hat.values() if isinstance(q_hat, QFunction) else np.asarray(q_hat, dtype=float)
    truth = q_true.values() if isinstance(q_true, QFunction) else np.asarray(q_true, dtype=float)
    mask = np.ones(truth.shape, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    if mask.ndim == 1:
        mask = np.repeat(mask[:, None], truth.shape[1], axis=1)
    denom = float(np.sum(truth[mask] ** 2))
    if denom == 0.0:
        raise MetricError("true Q-function is zero on the support; relative error undefined")
    return float(np.sum((est[mask] - truth[mask]) ** 2)) / denom


def truncation_horizon(gamma, reward_bound, tol=1e-4):
    """Smallest ``T`` with ``gamma^T * reward_bound / (1 - gamma) < tol``."""
    if reward_bound <= 0:
        return 1
    return max(1, math.ceil(math.log(tol * (1.0 - gamma) / reward_bound) / math.log(gamma)) + 1)


def monte_carlo_iptw_q(mdp, pi_e, pi_b, n_traj=100_000, horizon=None, seed=0):
    """Importance-weighted Monte-Carlo Q-values from behavior rollouts.

    For every pair ``(s, a)``, ``n_traj`` trajectories start at ``(s, a)``,
    follow ``pi_b`` for ``horizon`` steps and score
    ``sum_t gamma^t rho_{1:t} r(S_t, A_t)``, where ``rho_{1:t}`` is the
    product of ``pi_e / pi_b`` over the actions after the first.

    Returns
    -------
    mean, se : ndarray of shape (S, A)
        Monte-Carlo estimate and its standard error.
    """
    S, A = mdp.n_states, mdp.n_actions
    probs_e, probs_b = pi_e.probs, pi_b.probs
    if horizon is None:
        horizon = truncation_horizon(mdp.gamma, float(np.max(np.abs(mdp.reward))))
    ratio = np.divide(probs_e, probs_b, out=np.zeros_like(probs_e), where=probs_b > 0)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    b_cdf = np.cumsum(probs_b, axis=1)
    rng = np.random.default_rng(seed)
    mean, se = np.zeros((S, A)), np.zeros((S, A))
    for s0 in range(S):
        for a0 in range(A):
            state = np.full(n_traj, s0)
            action = np.full(n_traj, a0)
            weight = np.ones(n_traj)
            total = np.zeros(n_traj)
            for t in range(horizon):
                if t > 0:
                    action = np.minimum((rng.random((n_traj, 1)) > b_cdf[state]).sum(axis=1), A - 1)
                    weight *= mdp.gamma * ratio[state, action]
                total += weight * mdp.reward[state, action]
                state = np.minimum((rng.random((n_traj, 1)) > P_cdf[state, action]).sum(axis=1), S - 1)
            mean[s0, a0] = total.mean()
            se[s0, a0] = total.std(ddof=1) / math.sqrt(n_traj)
    return mean, se


# -- running ------------------------------------------------------------------


@dataclass
class _Point:
    cfg: ExperimentConfig
    mdp: object
    pi_b: object
    pi_e: object
    truth: np.ndarray
    support: np.ndarray
    fmap: object
    ratio: object


def prepare_point(cfg, base_mdp, q_star):
    mdp = base_mdp.with_gamma(cfg.gamma)
    pi_b = epsilon_greedy(q_star, cfg.eps_b)
    pi_e = epsilon_greedy(q_star, cfg.eps_e)
    truth = exact_policy_q(mdp, pi_e).values()
    support = support_mask(mdp, pi_b, cfg.support)
    if cfg.ratio_marginal == "population":
        p = behavior_state_distribution(mdp, pi_b, horizon=cfg.max_steps)
        ratio = oracle_density_ratio(mdp, pi_e, pi_b, p, unvisited="zero")
    else:
        ratio = lambda train: oracle_density_ratio(mdp, pi_e, pi_b, state_marginal(train), unvisited="zero")  # noqa: E731
    return _Point(cfg, mdp, pi_b, pi_e, truth, support, build_model_class(cfg, mdp), ratio)


def make_estimator(method, point):
    cfg = point.cfg
    behavior = point.pi_b if cfg.behavior == "oracle" else None
    common = dict(pi_e=point.pi_e, gamma=cfg.gamma, model_class=point.fmap, ridge=cfg.ridge)
    if method == "fqe":
        return FittedQEvaluation(iterations=cfg.fqe_iterations, **common)
    if method == "q_regression":
        return QRegression(behavior_policy=behavior, smoothing=cfg.smoothing, **common)
    if method == "mql":
        return MinimaxQLearning(behavior_policy=behavior, smoothing=cfg.smoothing, **common)
    if method == "drq":
        first = FittedQEvaluation(iterations=cfg.fqe_iterations, **common)
        return DRQLearner(first_stage=first, behavior_policy=behavior, density_ratio=point.ratio,
                          smoothing=cfg.smoothing, n_folds=cfg.folds, **common)
    raise ParameterError(f"unknown method {method!r}")


def run_experiment(cfg, log=None):
    """All ``(sweep value, seed, method)`` runs of ``cfg``.

    A method that raises a package error or a numerical failure yields a
    row with ``rmse = nan`` and the exception class in ``error`` rather
    than aborting the sweep.
    """
    base = build_env(cfg)
    q_star = value_iteration(base)
    values = cfg.sweep_values if cfg.sweep_param else (None,)
    param = cfg.sweep_param or "none"
    rows = []
    for value in values:
        point = prepare_point(cfg.point(value), base, q_star)
        for seed in cfg.seeds:
            ds = sample_dataset(point.mdp, point.pi_b, point.cfg.n_episodes, point.cfg.max_steps, seed=seed)
            for method in cfg.methods:
                start = time.perf_counter()
                error = None
                try:
                    q = make_estimator(method, point).fit(ds).q_function_
                    value_rmse = rmse(q, point.truth, point.support)
                    if not math.isfinite(value_rmse):
                        error, value_rmse = "NonFinite", float("nan")
                except (DRQError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    error, value_rmse = type(exc).__name__, float("nan")
                elapsed = int(round(1000 * (time.perf_counter() - start)))
                rows.append(ResultRow(method, seed, param, value, value_rmse, elapsed, error))
                if log is not None:
                    log(rows[-1])
    return sort_rows(rows)


def sort_rows(rows):
    def key(r):
        v = -math.inf if r.sweep_value is None else float(r.sweep_value)
        return (r.method, v, r.seed)
    return sorted(rows, key=key)


# -- result files -------------------------------------------------------------


def _fmt_value(v):
    if v is None:
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def _fmt_float(x):
    return "nan" if not math.isfinite(x) else repr(float(x))


def summarize(rows):
    """``{(method, sweep_value): (n_runs, n_failed, mean, se)}`` over successful runs."""
    groups = {}
    for r in sort_rows(rows):
        groups.setdefault((r.method, r.sweep_param, r.sweep_value), []).append(r)
    out = {}
    for key, group in groups.items():
        ok = np.array([r.rmse for r in group if not r.failed], dtype=float)
        n_failed = len(group) - ok.size
        mean = float(ok.mean()) if ok.size else float("nan")
        se = float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else float("nan")
        out[key] = (len(group), n_failed, mean, se)
    return out


def _sibling(path, suffix):
    path = Path(path)
    return path.with_name(f"{path.stem}_{suffix}{path.suffix or '.csv'}")


def emit_results(rows, path):
    """Write the detail, summary and timing files; return their paths.

    The detail file holds only deterministic columns so repeated runs of
    one config are byte-identical; wall times go to the ``_timing``
    companion.
    """
    rows = sort_rows(rows)
    if not rows:
        raise ParameterError("no result rows to write")
    path = Path(path)
    paths = {"detail": path, "summary": _sibling(path, "summary"), "timing": _sibling(path, "timing")}
    with open(paths["detail"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DETAIL_HEADER)
        for r in rows:
            writer.writerow((r.method, r.seed, r.sweep_param, _fmt_value(r.sweep_value), _fmt_float(r.rmse)))
    with open(paths["timing"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TIMING_HEADER)
        for r in rows:
            writer.writerow((r.method, r.seed, r.sweep_param, _fmt_value(r.sweep_value), r.wall_time_ms))
    with open(paths["summary"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for (method, param, value), (n, failed, mean, se) in summarize(rows).items():
            writer.writerow((method, param, _fmt_value(value), n, failed, _fmt_float(mean), _fmt_float(se)))
    return paths


def panel_name(cfg):
    """Figure panel of a sweep: ``A``/``B`` for tabular/linear, 1-3 for n/h/eps_e."""
    if cfg.sweep_param is None:
        raise ParameterError("plot data needs a sweep")
    return ("A" if cfg.fclass == "tabular" else "B") + str(SWEEP_PARAMS.index(cfg.sweep_param) + 1)


def emit_plot_data(rows, cfg, out_dir):
    """Long-format table for the figure panel of ``cfg`` in ``out_dir``."""
    name = panel_name(cfg)
    out = Path(out_dir) / f"panel_{name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PANEL_HEADER)
        for (method, param, value), (n, _, mean, se) in summarize(rows).items():
            writer.writerow((name, method, param, _fmt_value(value), n, _fmt_float(mean), _fmt_float(se)))
    return out

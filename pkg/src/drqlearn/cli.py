"""Command-line entry point: ``drqlearn {simulate,fit,evaluate,sweep,probe}``."""

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .data import read_dataset, sample_dataset, write_dataset
from .drq import NuisanceDirection, probe_response, quasi_oracle_errors, td_error_zero_check
from .exceptions import DRQError
from .io import read_q_table, write_q_table
from .mdp import value_iteration
from .nuisance import oracle_nuisances
from .policy import epsilon_greedy

VERBS = ("simulate", "fit", "evaluate", "sweep", "probe")
PROBE_DIRECTIONS = {
    "pi_b": ("pi_b",),
    "w": ("w",),
    "q1": ("q1",),
    "q1+w": ("q1", "w"),
    "q1+pi_b": ("q1", "pi_b"),
    "all": ("pi_b", "w", "q1"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--out", help="output file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry; repeatable, last wins")
    common.add_argument("--plot-data", action="store_true", help="also write per-panel plot tables (sweep)")
    common.add_argument("--support", choices=("reachable", "all"), help="state-action support of the metric")
    common.add_argument("--folds", type=int, metavar="K", help="cross-fitting folds for the DR learner")
    common.add_argument("--seed", type=int, metavar="N", help="single seed (replaces the config seeds)")
    common.add_argument("--env", help="environment: taxi, chain(n) or random(n,a,seed)")

    parser = _Parser(prog="drqlearn", description="Doubly robust Q-function estimation benchmarks.")
    sub = parser.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}", parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="sample a behavior-policy dataset")
    p_fit = sub.add_parser("fit", parents=[common], help="fit one method and write its Q table")
    p_fit.add_argument("--data", help="dataset CSV (sampled from the config when omitted)")
    p_fit.add_argument("--method", choices=bench.METHODS, help="method to fit (default: first in config)")
    p_eval = sub.add_parser("evaluate", parents=[common], help="relative error of a Q table against the truth")
    p_eval.add_argument("--q", required=True, help="Q table CSV with columns s,a,value")
    sub.add_parser("sweep", parents=[common], help="run a benchmark sweep and write result files")
    sub.add_parser("probe", parents=[common], help="orthogonality and TD-error diagnostics")
    return parser


def resolve_config(args):
    overrides = list(args.overrides)
    if args.env is not None:
        overrides.append(f"env={args.env}")
    if args.support is not None:
        overrides.append(f"support={args.support}")
    if args.folds is not None:
        overrides.append(f"folds={args.folds}")
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config!r} does not exist")
    return bench.load_config(args.config, overrides)


def _setting(cfg):
    base = bench.build_env(cfg)
    return bench.prepare_point(cfg, base, value_iteration(base))


def cmd_simulate(args, out):
    cfg = resolve_config(args)
    point = _setting(cfg)
    ds = sample_dataset(point.mdp, point.pi_b, cfg.n_episodes, cfg.max_steps, seed=cfg.seeds[0])
    path = args.out or "dataset.csv"
    write_dataset(ds, path)
    print(f"wrote {len(ds)} transitions from {ds.n_episodes} episodes to {path}", file=out)


def cmd_fit(args, out):
    cfg = resolve_config(args)
    point = _setting(cfg)
    if args.data:
        ds = read_dataset(args.data, point.mdp.n_states, point.mdp.n_actions, point.mdp.terminal_mask)
    else:
        ds = sample_dataset(point.mdp, point.pi_b, cfg.n_episodes, cfg.max_steps, seed=cfg.seeds[0])
    method = args.method or cfg.methods[0]
    q = bench.make_estimator(method, point).fit(ds).q_function_
    path = args.out or "q_table.csv"
    write_q_table(q, path)
    print(f"method={method}", file=out)
    print(f"rmse={bench.rmse(q, point.truth, point.support)!r}", file=out)
    print(f"wrote {path}", file=out)


def cmd_evaluate(args, out):
    cfg = resolve_config(args)
    point = _setting(cfg)
    q = read_q_table(args.q, point.mdp.n_states, point.mdp.n_actions)
    value = bench.rmse(q, point.truth, point.support)
    print(f"rmse={value!r}", file=out)
    if args.out:
        Path(args.out).write_text(yaml.safe_dump({"rmse": value, "support": cfg.support}))


def cmd_sweep(args, out):
    cfg = resolve_config(args)
    rows = bench.run_experiment(cfg)
    paths = bench.emit_results(rows, args.out or "results.csv")
    for kind, path in paths.items():
        print(f"{kind}={path}", file=out)
    if args.plot_data:
        print(f"plot_data={bench.emit_plot_data(rows, cfg, Path(paths['detail']).parent)}", file=out)
    failed = sum(r.failed for r in rows)
    if failed:
        print(f"failed_runs={failed}", file=out)


def cmd_probe(args, out):
    cfg = resolve_config(args)
    kind, env_args = bench.parse_env(cfg.env)
    if kind == "random" and not env_args:
        seed = cfg.seeds[0]
        cfg = bench.ExperimentConfig.from_dict({**cfg.to_dict(), "env": f"random(5,3,{seed})"})
    if kind == "taxi":
        raise UsageError("probe runs on small models; use --env random or chain(n)")
    mdp = bench.build_env(cfg)
    q_star = value_iteration(mdp)
    pi_b, pi_e = epsilon_greedy(q_star, cfg.eps_b), epsilon_greedy(q_star, cfg.eps_e)
    ns = oracle_nuisances(mdp, pi_e, pi_b)
    seed = cfg.seeds[0]
    lines = {"env": cfg.env}
    for name, comps in PROBE_DIRECTIONS.items():
        res = probe_response(mdp, pi_e, pi_b, NuisanceDirection.random(ns, comps, seed), seed=seed)
        lines[f"slope_L3[{name}]"] = res.slope
        lines[f"max_response_L3[{name}]"] = float(res.response.max())
    res = probe_response(mdp, pi_e, pi_b, NuisanceDirection.random(ns, ("q1",), seed), loss="L1", seed=seed)
    lines["slope_L1[q1]"] = res.slope
    lines["quasi_oracle_slope"] = quasi_oracle_errors(mdp, pi_e, pi_b, seed=seed)[2]
    f = np.random.default_rng(seed).uniform(0.0, 1.0, (mdp.n_states, mdp.n_actions))
    lines["td_error_check"] = td_error_zero_check(mdp, pi_b, pi_e, f)
    for key, value in lines.items():
        print(f"{key}={value}", file=out)
    if args.out:
        Path(args.out).write_text("".join(f"{k}={v}\n" for k, v in lines.items()))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "probe": cmd_probe}


def main(argv=None, out=None):
    """Run the CLI; returns 0 on success, 1 on usage errors, 2 on runtime errors."""
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
        if args.verb is None:
            parser.print_help(sys.stderr)
            return 1
        COMMANDS[args.verb](args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DRQError, OSError, ValueError, ArithmeticError, yaml.YAMLError) as exc:
        print(f"drqlearn: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

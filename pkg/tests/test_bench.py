import csv
import math

import numpy as np
import pytest

from drqlearn import MetricError, ParameterError
from drqlearn.bench import (ExperimentConfig, ResultRow, apply_overrides, emit_plot_data, emit_results,
                            load_config, monte_carlo_iptw_q, panel_name, parse_env, rmse, run_experiment,
                            summarize, support_mask, truncation_horizon)
from drqlearn.mdp import exact_policy_q, make_random_mdp, make_taxi_mdp, value_iteration
from drqlearn.policy import StochasticPolicy, epsilon_greedy

SMALL = dict(env="random(4,2,3)", n_episodes=40, max_steps=20, seeds=[0, 1])


def test_rmse_values():
    truth = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert rmse(truth, truth) == 0.0
    assert rmse(2 * truth, truth) == pytest.approx(1.0)
    assert rmse(np.zeros((2, 2)), truth) == pytest.approx(1.0)
    mask = np.array([True, False])
    assert rmse(truth + np.array([[1.0, 1.0], [9.0, 9.0]]), truth, mask) == pytest.approx(2.0 / 5.0)


def test_rmse_zero_truth():
    with pytest.raises(MetricError):
        rmse(np.ones((2, 2)), np.zeros((2, 2)))


def test_support_excludes_terminals_and_unreachable():
    mdp = make_taxi_mdp(0.9)
    pi_b = epsilon_greedy(value_iteration(mdp), 0.5)
    mask = support_mask(mdp, pi_b)
    assert mask.sum() == 400 * 6
    assert not mask[mdp.terminal_mask].any()
    assert support_mask(mdp, pi_b, "all").all()
    with pytest.raises(ParameterError):
        support_mask(mdp, pi_b, "some")


def test_parse_env():
    assert parse_env("taxi") == ("taxi", ())
    assert parse_env("chain(7)") == ("chain", (7,))
    assert parse_env("random(5, 3, 2)") == ("random", (5, 3, 2))
    for bad in ("grid", "taxi(3)", "random(1)"):
        with pytest.raises(ParameterError):
            parse_env(bad)


def test_config_validation():
    with pytest.raises(ParameterError):
        ExperimentConfig(gamma=1.0)
    with pytest.raises(ParameterError):
        ExperimentConfig(methods=("drq", "magic"))
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"unknown": 1})
    with pytest.raises(ParameterError):
        ExperimentConfig(sweep_param="h", sweep_values=(1,))


def test_sweep_points():
    cfg = ExperimentConfig(sweep_param="h", sweep_values=(4, 10))
    assert cfg.point(4).gamma == pytest.approx(0.75)
    assert ExperimentConfig(sweep_param="n").sweep_values == tuple(range(2000, 6001, 500))
    assert ExperimentConfig(sweep_param="eps_e").point(0.3).eps_e == 0.3


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = ExperimentConfig(sweep_param="eps_e", sweep_values=(0.1, 0.5))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    doc = apply_overrides({"gamma": 0.9, "sweep": {"param": "n", "values": [10]}},
                          ["gamma=0.8", "sweep.values=[20, 30]", "gamma=0.7"])
    assert doc["gamma"] == 0.7 and doc["sweep"]["values"] == [20, 30]
    with pytest.raises(ParameterError):
        apply_overrides({}, ["novalue"])
    path = tmp_path / "c.yaml"
    path.write_text("env: chain(3)\nn_episodes: 10\n")
    assert load_config(path, ["max_steps=5"]).max_steps == 5


def test_run_experiment_rows():
    cfg = ExperimentConfig.from_dict({**SMALL, "sweep": {"param": "n", "values": [20, 40]}})
    rows = run_experiment(cfg)
    assert len(rows) == 2 * 2 * 4
    assert all(math.isfinite(r.rmse) and not r.failed for r in rows)
    assert [(r.method, r.sweep_value, r.seed) for r in rows] == sorted((r.method, r.sweep_value, r.seed)
                                                                       for r in rows)


def test_failed_runs_recorded_not_raised(monkeypatch):
    from drqlearn import NumericError, bench

    real = bench.make_estimator

    class Exploding:
        def fit(self, ds):
            raise NumericError("weights overflow")

    monkeypatch.setattr(bench, "make_estimator",
                        lambda method, point: Exploding() if method == "q_regression" else real(method, point))
    cfg = ExperimentConfig(env="random(4,2,3)", n_episodes=20, max_steps=10, seeds=(0,),
                           methods=("q_regression", "fqe"))
    rows = run_experiment(cfg)
    bad = [r for r in rows if r.method == "q_regression"][0]
    assert bad.failed and bad.error == "NumericError" and math.isnan(bad.rmse)
    assert not [r for r in rows if r.method == "fqe"][0].failed
    assert summarize(rows)[("q_regression", "none", None)][:2] == (1, 1)


def test_summary_mean_and_se():
    rows = [ResultRow("fqe", s, "n", 10, v, 0) for s, v in enumerate([1.0, 2.0, 3.0])]
    rows.append(ResultRow("fqe", 9, "n", 10, float("nan"), 0, "NumericError"))
    n, failed, mean, se = summarize(rows)[("fqe", "n", 10)]
    assert (n, failed, mean) == (4, 1, 2.0)
    assert se == pytest.approx(1.0 / math.sqrt(3))
    single = summarize([ResultRow("fqe", 0, "none", None, 1.0, 0)])[("fqe", "none", None)]
    assert math.isnan(single[3])


def test_result_files(tmp_path):
    cfg = ExperimentConfig.from_dict({**SMALL, "sweep": {"param": "eps_e", "values": [0.1, 0.5]}})
    rows = run_experiment(cfg)
    paths = emit_results(rows, tmp_path / "out.csv")
    with open(paths["detail"]) as fh:
        detail = list(csv.DictReader(fh))
    assert list(detail[0]) == ["method", "seed", "sweep_param", "sweep_value", "rmse"]
    assert len(detail) == len(rows)
    with open(paths["summary"]) as fh:
        summary = list(csv.DictReader(fh))
    assert len(summary) == 4 * 2
    with open(paths["timing"]) as fh:
        assert "wall_time_ms" in fh.readline()
    panel = emit_plot_data(rows, cfg, tmp_path)
    assert panel.name == "panel_A3.csv"
    with pytest.raises(ParameterError):
        emit_results([], tmp_path / "empty.csv")


def test_detail_file_is_reproducible(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    a = emit_results(run_experiment(cfg), tmp_path / "a.csv")["detail"]
    b = emit_results(run_experiment(cfg), tmp_path / "b.csv")["detail"]
    assert a.read_bytes() == b.read_bytes()


def test_panel_names():
    assert panel_name(ExperimentConfig(sweep_param="n")) == "A1"
    assert panel_name(ExperimentConfig(fclass="linear", sweep_param="eps_e")) == "B3"
    with pytest.raises(ParameterError):
        panel_name(ExperimentConfig())


def test_truncation_horizon():
    T = truncation_horizon(0.9, 1.0, 0.01)
    assert 0.9**T * 10 < 0.01 <= 0.9 ** (T - 2) * 10


def test_monte_carlo_on_policy_single_pair():
    mdp = make_random_mdp(2, 1, 0.5, 0)
    pi = StochasticPolicy.uniform(2, 1)
    mean, se = monte_carlo_iptw_q(mdp, pi, pi, n_traj=20_000, seed=0)
    truth = exact_policy_q(mdp, pi).values()
    assert np.all(np.abs(mean - truth) < 4 * se + 1e-3)

import dataclasses
import json
import math

import numpy as np
import pytest
from scipy.special import logit
from scipy.stats import norm

from dynbeta.core import BetaConfig
from dynbeta.data import RatioMode, SynthConfig
from dynbeta.errors import ConfigError, DataError, TrainingError
from dynbeta.experiment import (
    DEFAULT_ARMS,
    ExperimentConfig,
    ExperimentReport,
    arm_pairs,
    check_arm,
    fixed_arm_value,
    judge_accuracy_mc,
    parse_ratio,
    prepare,
    quality_targets,
    report_json,
    run_arm,
    run_arms,
    run_baseline_comparison,
    run_design,
    run_noise_robustness,
    sigma_for_accuracy,
    table_csv,
    with_arm_context,
    write_report,
)
from dynbeta.judge import JudgeConfig


def small(**kw):
    kw.setdefault("synth", SynthConfig(num_questions=160))
    kw.setdefault("sweep", None)
    kw.setdefault("bootstrap_iterations", 500)
    return ExperimentConfig(**kw)


@pytest.fixture(scope="module")
def prepared():
    cfg = small()
    return cfg, prepare(cfg)


def test_arm_names():
    assert fixed_arm_value("fixed_0.5") == 0.5 and fixed_arm_value("dynamic") is None
    assert check_arm("fixed_1") == "fixed_1"
    for bad in ("fixed_1.5", "fixed_x", "vanilla", ""):
        with pytest.raises(ConfigError):
            check_arm(bad)


def test_parse_ratio():
    r = parse_ratio("1:3")
    assert (r.mode, r.gt_pairs, r.cb_pairs) == (RatioMode.FIXED, 1, 3)
    r = parse_ratio("random:3")
    assert (r.mode, r.max_cb) == (RatioMode.RANDOM, 3)
    for bad in ("3", "a:b", "1:-1", "0:0"):
        with pytest.raises(ConfigError):
            parse_ratio(bad)


def test_config_validation_and_seed_propagation():
    cfg = ExperimentConfig(seed=7)
    assert cfg.synth.rng_seed == cfg.split.seed == cfg.judge.rng_seed == cfg.grpo.seed == 7
    assert cfg.rm.shuffle_seed == cfg.rm.init_seed == 7
    assert (cfg.pair_seed, cfg.val_pair_seed) == (7, 8)
    with pytest.raises(ConfigError):
        ExperimentConfig(arms=("dynamic", "dynamic"))
    with pytest.raises(ConfigError):
        ExperimentConfig(arms=())
    with pytest.raises(ConfigError):
        ExperimentConfig(train_order="sideways")
    with pytest.raises(ConfigError):
        ExperimentConfig(noise_targets=(0.4,))
    with pytest.raises(ConfigError):
        ExperimentConfig(ratios=("1-3",))


def test_train_order_only_moves_baseline():
    cfg = ExperimentConfig()
    assert cfg.ordered_arms()[-1] == "fixed_1.0"
    flipped = dataclasses.replace(cfg, train_order="baseline_first")
    assert flipped.ordered_arms()[0] == "fixed_1.0"
    assert sorted(flipped.ordered_arms()) == sorted(DEFAULT_ARMS)


def test_arm_isolation(prepared):
    cfg, prep = prepared
    together = run_arms(prep, cfg)
    for arm in ("dynamic", "fixed_0.5", "random"):
        alone = run_arm(prep, arm, cfg)
        assert np.array_equal(alone.outcome.gt_rates, together[arm].outcome.gt_rates)
        assert alone.model.param_bytes() == together[arm].model.param_bytes()
    # the shared pairs are never mutated by an arm
    assert all(p.beta is None for p in prep.pairs)


def test_order_does_not_change_results(prepared):
    cfg, prep = prepared
    a = run_arms(prep, cfg)
    b = run_arms(prep, dataclasses.replace(cfg, train_order="baseline_first"))
    for arm in cfg.arms:
        assert np.array_equal(a[arm].answers, b[arm].answers)


def test_fixed_one_equals_unweighted(prepared):
    cfg, prep = prepared
    fixed = run_arm(prep, "fixed_1.0", cfg)
    plain = run_arm(prep, "unweighted", cfg)
    assert fixed.model.param_bytes() == plain.model.param_bytes()
    assert np.array_equal(fixed.answers, plain.answers)


def test_arm_betas(prepared):
    cfg, prep = prepared
    dyn = arm_pairs("dynamic", prep.pairs, prep.beta, cfg.seed, prep.train, prep.scores)
    gt_chosen = [p.beta for p in dyn if not p.chosen.is_bias_consistent]
    cb_chosen = [p.beta for p in dyn if p.chosen.is_bias_consistent]
    assert min(gt_chosen) > 0.9 and max(cb_chosen) < 0.1
    only = arm_pairs("scenario_only", prep.pairs, prep.beta, cfg.seed, prep.train, prep.scores)
    by_q = {}
    for p in only:
        by_q.setdefault(p.question_id, set()).add(p.beta)
    # the pooled response score removes any gt/cb distinction inside a question
    assert all(len(v) == 1 for v in by_q.values())


def test_clean_control_matches_baseline():
    cfg = small(ratio=parse_ratio("1:0"), arms=("dynamic", "fixed_1.0"))
    report = run_baseline_comparison(cfg)
    gt = report.summary["gt_rate"]
    assert abs(gt["dynamic"] - gt["fixed_1.0"]) <= 0.05


def test_arm_context_in_errors(prepared):
    cfg, prep = prepared
    err = with_arm_context("random", TrainingError("diverged"))
    assert str(err) == "arm random: diverged" and err.exit_code == TrainingError("x").exit_code
    bare = [dataclasses.replace(q, scenario_bias_score=None) for q in prep.train]
    broken = dataclasses.replace(prep, train=bare)
    with pytest.raises(DataError, match="^arm scenario: .*scenario_bias_score"):
        run_arm(broken, "scenario", cfg)


# -- noise -----------------------------------------------------------------

def analytic_accuracy(sigma, judge=JudgeConfig()):
    gap = logit(judge.high_score) - logit(judge.low_score)
    return 1.0 if sigma == 0 else norm.cdf(gap / (sigma * math.sqrt(2.0)))


@pytest.mark.parametrize("target", [0.95, 0.83, 0.70, 0.57])
def test_sigma_solver_matches_closed_form(target):
    sigma = sigma_for_accuracy(target, JudgeConfig())
    assert analytic_accuracy(sigma) == pytest.approx(target, abs=0.01)


def test_sigma_solver_edges():
    assert sigma_for_accuracy(1.0, JudgeConfig()) == 0.0
    assert sigma_for_accuracy(0.5, JudgeConfig()) == 1000.0
    z = np.random.default_rng(0).standard_normal((1000, 2))
    assert judge_accuracy_mc(0.0, JudgeConfig(), z) == 1.0
    with pytest.raises(ConfigError):
        sigma_for_accuracy(0.3, JudgeConfig())


def test_noise_schedule():
    report = run_noise_robustness(ExperimentConfig(noise_questions=500), targets=(1.0, 0.83, 0.70, 0.57))
    rows = report.table("noise")
    assert rows[0]["sigma"] == 0.0 and rows[0]["benefit_damage_ratio"] == math.inf
    acc = [r["judge_accuracy"] for r in rows]
    assert all(a > b for a, b in zip(acc, acc[1:]))
    for row in rows:
        assert row["judge_accuracy"] == pytest.approx(row["target_accuracy"], abs=0.03)
    assert json.loads(report_json(report))["tables"]["noise"][0]["benefit_damage_ratio"] == "inf"


def test_quality_targets_span():
    targets = quality_targets(ExperimentConfig())
    assert len(targets) == 10
    assert min(targets.values()) == 0.5 and max(targets.values()) == 1.0


# -- reporting -------------------------------------------------------------

def test_report_json_sentinels():
    report = ExperimentReport("x", 1, {"t": [{"a": math.nan, "b": math.inf, "c": np.float64(0.5),
                                               "d": np.int64(3), "e": np.bool_(True)}]})
    data = json.loads(report_json(report))
    assert data["tables"]["t"][0] == {"a": "nan", "b": "inf", "c": 0.5, "d": 3, "e": True}


def test_table_csv_union_of_columns():
    text = table_csv([{"a": 1, "b": 0.5}, {"a": 2, "c": True}])
    assert text.splitlines() == ["a,b,c", "1,0.5,", "2,,true"]


def test_write_report_files(tmp_path):
    report = run_design("baseline", small())
    written = {p.name for p in write_report(report, tmp_path)}
    assert {"report.json", "report.csv", "arms.csv", "comparisons.csv", "per_type.csv",
            "dynamic_vs_arms.csv"} <= written
    assert (tmp_path / "report.csv").read_text() == (tmp_path / "arms.csv").read_text()
    assert json.loads((tmp_path / "report.json").read_text())["design"] == "baseline_comparison"
    with pytest.raises(ConfigError):
        run_design("nope", small())


def test_plot_data_emitted(tmp_path):
    report = run_noise_robustness(ExperimentConfig(noise_questions=300), targets=(0.9, 0.7))
    write_report(report, tmp_path)
    header = (tmp_path / "plot_benefit_damage_vs_judge_accuracy.csv").read_text().splitlines()[0]
    assert header == "seed,sigma,judge_accuracy,benefit_damage_ratio"


def test_report_is_deterministic():
    a = report_json(run_baseline_comparison(small()))
    b = report_json(run_baseline_comparison(small()))
    assert a == b


def test_win_rate_uses_dynamic_reward(prepared):
    report = run_baseline_comparison(small())
    row = report.row("comparisons", arm="dynamic")
    assert 0.5 < row["win_rate"] <= 1.0
    assert report.row("arms", arm="dynamic")["k"] == BetaConfig().k

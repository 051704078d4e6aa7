"""End-to-end study designs on the synthetic pipeline.

Every design follows the same skeleton: build one dataset, split and score it
once, then train a reward model and a policy per beta arm. Arms share data,
judge scores and every seed, so they differ only in the beta values their
pairs carry. Per-question test GT rates feed the paired statistics.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dynbeta.analysis import (
    PairedSample,
    SweepGrid,
    SweepResult,
    benefit_damage_ratio,
    judge_correctness,
    paired_summary,
    spearman_pvalue,
    spearman_rho,
    sweep_k_theta,
)
from dynbeta.core import BetaConfig, BetaMode, PreferencePair, Provenance, Question, assign_betas, rng_for
from dynbeta.data import (
    PairRatioConfig,
    RatioMode,
    SplitConfig,
    SynthConfig,
    bias_type_name,
    corrupt_to_pairs,
    generate_questions,
    load_questions_csv,
    split_stratified,
)
from dynbeta.errors import ConfigError, DataError, LabError
from dynbeta.judge import (
    ExternalJudge,
    JudgeConfig,
    JudgeKind,
    Scores,
    apply_calibration,
    attach_scores,
    calibrate,
    pairwise_judge_accuracy,
    per_type_accuracy,
    perturb_score,
    score_questions,
)
from dynbeta.policy import Answer, GrpoConfig, Policy, eval_answers, mean_shaped_reward, train_policy
from dynbeta.reward import RewardModel, RmTrainConfig, calibrate_offset, rm_pairwise_accuracy, train_reward_model

log = logging.getLogger(__name__)

DYNAMIC = "dynamic"
RANDOM = "random"
SCENARIO = "scenario"
RESPONSE_ONLY = "response_only"
SCENARIO_ONLY = "scenario_only"
UNWEIGHTED = "unweighted"
BASELINE = "fixed_1.0"
NAMED_ARMS = (DYNAMIC, RANDOM, SCENARIO, RESPONSE_ONLY, SCENARIO_ONLY, UNWEIGHTED)
DEFAULT_ARMS = (DYNAMIC, "fixed_0.1", "fixed_0.5", "fixed_0.9", BASELINE, RANDOM)
ABLATION_ARMS = (BASELINE, SCENARIO, RESPONSE_ONLY, SCENARIO_ONLY)
DEFAULT_RATIOS = ("1:1", "1:3", "1:5", "random:3")
DEFAULT_NOISE_TARGETS = (0.83, 0.77, 0.70, 0.63, 0.57)
TRAIN_ORDERS = ("debiased_first", "baseline_first")
SIGMA_MAX = 1000.0

_FIXED_ARM = re.compile(r"^fixed_(\d+(?:\.\d+)?)$")


def fixed_arm_value(arm: str) -> Optional[float]:
    m = _FIXED_ARM.match(arm)
    return float(m.group(1)) if m else None


def check_arm(arm: str) -> str:
    if arm in NAMED_ARMS:
        return arm
    value = fixed_arm_value(arm)
    if value is None or not 0.0 <= value <= 1.0:
        raise ConfigError(f"unknown beta arm {arm!r}; use one of {NAMED_ARMS} or fixed_<value in [0, 1]>")
    return arm


def parse_ratio(label: str) -> PairRatioConfig:
    """``"g:c"`` gives g gt-chosen and c cb-chosen pairs per question; ``"random:m"`` draws c from 0..m."""
    head, sep, tail = str(label).partition(":")
    try:
        if not sep:
            raise ValueError
        if head == "random":
            return PairRatioConfig(RatioMode.RANDOM, gt_pairs=1, max_cb=int(tail))
        return PairRatioConfig(RatioMode.FIXED, gt_pairs=int(head), cb_pairs=int(tail))
    except ValueError:
        raise ConfigError(f"bad ratio label {label!r}; expected 'gt:cb' or 'random:max_cb'") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one study needs. ``seed`` overrides every sub-config seed."""

    seed: int = 42
    synth: SynthConfig = SynthConfig()
    questions_csv: Optional[str] = None
    split: SplitConfig = SplitConfig()
    ratio: PairRatioConfig = PairRatioConfig()
    arms: Tuple[str, ...] = DEFAULT_ARMS
    baseline: str = BASELINE
    beta: BetaConfig = BetaConfig()
    sweep: Optional[SweepGrid] = SweepGrid()
    judge: JudgeConfig = JudgeConfig()
    calibrate_judge: bool = False
    calibration_min_per_type: int = 20
    rm: RmTrainConfig = RmTrainConfig()
    grpo: GrpoConfig = GrpoConfig()
    bootstrap_iterations: int = 10_000
    ratios: Tuple[str, ...] = DEFAULT_RATIOS
    noise_targets: Tuple[float, ...] = DEFAULT_NOISE_TARGETS
    noise_questions: int = 2000
    noise_retrain: bool = False
    quality_types: int = 10
    quality_questions: int = 2000
    quality_accuracy_range: Tuple[float, float] = (0.5, 1.0)
    train_order: str = "debiased_first"
    jobs: int = 1
    settings: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        set_("arms", tuple(check_arm(a) for a in self.arms))
        if not self.arms:
            raise ConfigError("at least one beta arm is required")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError(f"duplicate beta arms in {self.arms}")
        check_arm(self.baseline)
        if self.train_order not in TRAIN_ORDERS:
            raise ConfigError(f"train_order must be one of {TRAIN_ORDERS}")
        if self.jobs < 1 or self.bootstrap_iterations < 1:
            raise ConfigError("jobs and bootstrap_iterations must be at least 1")
        for target in self.noise_targets:
            if not 0.5 <= target <= 1.0:
                raise ConfigError(f"noise target accuracy {target} outside [0.5, 1]")
        lo, hi = self.quality_accuracy_range
        if not 0.5 <= lo < hi <= 1.0:
            raise ConfigError("quality_accuracy_range must satisfy 0.5 <= lo < hi <= 1")
        if self.quality_types < 3:
            raise ConfigError("the judge-quality design needs at least 3 bias types")
        for label in self.ratios:
            parse_ratio(label)
        s = int(self.seed)
        set_("synth", dataclasses.replace(self.synth, rng_seed=s))
        set_("split", dataclasses.replace(self.split, seed=s))
        set_("judge", dataclasses.replace(self.judge, rng_seed=s))
        set_("rm", dataclasses.replace(self.rm, shuffle_seed=s, init_seed=s))
        set_("grpo", dataclasses.replace(self.grpo, seed=s))

    @property
    def pair_seed(self) -> int:
        return self.seed

    @property
    def val_pair_seed(self) -> int:
        return self.seed + 1

    def ordered_arms(self) -> Tuple[str, ...]:
        """Training order only; no arm reads another arm's state."""
        first = [a for a in self.arms if a != self.baseline]
        if self.baseline not in self.arms:
            return tuple(first)
        if self.train_order == "debiased_first":
            return tuple(first + [self.baseline])
        return tuple([self.baseline] + first)


# -- shared preparation ----------------------------------------------------

@dataclass
class Prepared:
    train: List[Question]
    val: List[Question]
    test: List[Question]
    scores: Scores
    pairs: List[PreferencePair]
    beta: BetaConfig
    calibration: Optional[Dict[str, str]] = None
    sweep: Optional[SweepResult] = None


def load_dataset(cfg: ExperimentConfig) -> List[Question]:
    if cfg.questions_csv:
        return load_questions_csv(cfg.questions_csv)
    return generate_questions(cfg.synth)[0]


def score_and_pair(cfg: ExperimentConfig, train, val, client: Optional[ExternalJudge] = None):
    raw = score_questions(list(train) + list(val), cfg.judge, client)
    cmap = None
    scores = raw
    if cfg.calibrate_judge:
        cmap = calibrate(val, raw, cfg.calibration_min_per_type)
        scores = apply_calibration(list(train) + list(val), raw, cmap)
    pairs = attach_scores(corrupt_to_pairs(train, cfg.ratio, cfg.pair_seed), scores)
    return scores, cmap, pairs


def select_beta(cfg: ExperimentConfig, train, val, scores, pairs) -> Tuple[BetaConfig, Optional[SweepResult]]:
    beta = cfg.beta.resolve([s for q in train for s in scores[q.id]])
    if cfg.sweep is None:
        return beta, None
    result = sweep_k_theta(pairs, val, cfg.sweep, cfg.rm, val_scores=scores)
    return dataclasses.replace(beta, k=result.k, theta=result.theta), result


def prepare(cfg: ExperimentConfig, client: Optional[ExternalJudge] = None) -> Prepared:
    train, val, test = split_stratified(load_dataset(cfg), cfg.split)
    scores, cmap, pairs = score_and_pair(cfg, train, val, client)
    beta, sweep = select_beta(cfg, train, val, scores, pairs)
    return Prepared(train, val, test, scores, pairs, beta, cmap, sweep)


# -- one arm ---------------------------------------------------------------

def arm_pairs(arm: str, pairs: Sequence[PreferencePair], beta: BetaConfig, seed: int,
              train: Sequence[Question], scores: Mapping[str, Tuple[float, float]]) -> List[PreferencePair]:
    """Attach the arm's beta values. The unweighted arm leaves ``beta`` unset."""
    value = fixed_arm_value(arm)
    if value is not None:
        return assign_betas(pairs, BetaConfig(BetaMode.FIXED, fixed_value=value))
    if arm == UNWEIGHTED:
        return list(pairs)
    if arm == RANDOM:
        return assign_betas(pairs, BetaConfig(BetaMode.RANDOM, per_question=beta.per_question), rng_seed=seed)
    if arm == DYNAMIC:
        return assign_betas(pairs, dataclasses.replace(beta, mode=BetaMode.DYNAMIC))
    scenario_cfg = dataclasses.replace(beta, mode=BetaMode.SCENARIO)
    d_s = {q.id: q.scenario_bias_score for q in train}
    if any(v is None for v in d_s.values()):
        raise DataError("scenario arms need a scenario_bias_score on every training question")
    if arm == SCENARIO:
        return assign_betas(pairs, scenario_cfg, scenario_scores=d_s)
    if arm == RESPONSE_ONLY:
        return assign_betas(pairs, scenario_cfg, scenario_scores={q: 1.0 for q in d_s})
    if arm == SCENARIO_ONLY:
        pooled = float(np.mean([s for q in train for s in scores[q.id]]))
        flat = [p.with_scores(pooled, pooled) for p in pairs]
        return assign_betas(flat, scenario_cfg, scenario_scores=d_s)
    raise ConfigError(f"unknown beta arm {arm!r}")


@dataclass
class ArmOutcome:
    """Everything the report needs from one trained arm."""

    arm: str
    seed: int
    question_ids: Tuple[str, ...]
    bias_types: Tuple[str, ...]
    gt_rates: np.ndarray
    rm_accuracy: float
    cb_rate: float
    unparseable_rate: float
    mean_beta_gt_chosen: float
    mean_beta_cb_chosen: float
    debiased_reward: Optional[np.ndarray] = None

    @property
    def gt_rate(self) -> float:
        return float(np.mean(self.gt_rates))


@dataclass
class ArmRun:
    outcome: ArmOutcome
    pairs: List[PreferencePair]
    model: RewardModel
    policy: Policy
    answers: np.ndarray


def beta_means(pairs: Sequence[PreferencePair]) -> Tuple[float, float]:
    """Mean beta over gt-chosen and over cb-chosen pairs (unset beta counts as 1)."""
    gt = [1.0 if p.beta is None else p.beta for p in pairs if p.provenance is Provenance.GT_CHOSEN]
    cb = [1.0 if p.beta is None else p.beta for p in pairs if p.provenance is Provenance.CB_CHOSEN]
    return (float(np.mean(gt)) if gt else math.nan, float(np.mean(cb)) if cb else math.nan)


def train_arm_rm(arm: str, pairs: Sequence[PreferencePair], train: Sequence[Question],
                 cfg: ExperimentConfig) -> RewardModel:
    betas = np.ones(len(pairs)) if arm == UNWEIGHTED else None
    model = train_reward_model(pairs, cfg.rm, betas=betas).model
    calibrate_offset(model, train)
    return model


def train_arm_policy(model: RewardModel, train: Sequence[Question], cfg: ExperimentConfig) -> Policy:
    start = Policy.zeros(train[0].dim, cfg.grpo.temperature, cfg.grpo.unparseable_prob)
    return train_policy(start, train, model, cfg.grpo).policy


def with_arm_context(arm: str, exc: LabError) -> LabError:
    exc.args = (f"arm {arm}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
    return exc


def outcome_from(arm: str, cfg: ExperimentConfig, pairs, model: RewardModel, answers: np.ndarray,
                 test: Sequence[Question]) -> ArmOutcome:
    b_gt, b_cb = beta_means(pairs)
    return ArmOutcome(
        arm=arm,
        seed=cfg.seed,
        question_ids=tuple(q.id for q in test),
        bias_types=tuple(q.bias_type for q in test),
        gt_rates=(answers == Answer.GT).mean(axis=1),
        rm_accuracy=rm_pairwise_accuracy(model, test),
        cb_rate=float(np.mean(answers == Answer.CB)),
        unparseable_rate=float(np.mean(answers == Answer.UNPARSEABLE)),
        mean_beta_gt_chosen=b_gt,
        mean_beta_cb_chosen=b_cb,
    )


def run_arm(prep: Prepared, arm: str, cfg: ExperimentConfig) -> ArmRun:
    """Assign betas, train the reward model and the policy, evaluate on the test split."""
    try:
        pairs = arm_pairs(arm, prep.pairs, prep.beta, cfg.seed, prep.train, prep.scores)
        model = train_arm_rm(arm, pairs, prep.train, cfg)
        policy = train_arm_policy(model, prep.train, cfg)
        answers = eval_answers(policy, prep.test, cfg.grpo.eval_samples, cfg.seed, cfg.grpo.greedy_eval)
    except LabError as exc:
        raise with_arm_context(arm, exc)
    log.info("arm %s done", arm)
    return ArmRun(outcome_from(arm, cfg, pairs, model, answers, prep.test), pairs, model, policy, answers)


def _run_arm_job(job):
    return run_arm(*job)


def run_arms(prep: Prepared, cfg: ExperimentConfig, arms: Optional[Sequence[str]] = None) -> Dict[str, ArmRun]:
    arms = list(cfg.ordered_arms() if arms is None else arms)
    jobs = [(prep, arm, cfg) for arm in arms]
    if cfg.jobs > 1 and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(arms))) as pool:
            runs = list(pool.map(_run_arm_job, jobs))
    else:
        runs = [_run_arm_job(job) for job in jobs]
    runs_by_arm = dict(zip(arms, runs))
    attach_debiased_rewards(runs_by_arm, prep.test, cfg.grpo)
    return runs_by_arm


def attach_debiased_rewards(runs: Mapping[str, ArmRun], test, grpo: GrpoConfig) -> None:
    """Score each arm's own evaluation samples with the dynamic arm's reward model."""
    if DYNAMIC not in runs:
        return
    judge_model = runs[DYNAMIC].model
    for run in runs.values():
        run.outcome.debiased_reward = mean_shaped_reward(run.answers, test, judge_model, grpo)


# -- report ----------------------------------------------------------------

@dataclass
class ExperimentReport:
    design: str
    seed: int
    tables: Dict[str, List[dict]] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)
    settings: Mapping[str, object] = field(default_factory=dict)

    def table(self, name: str) -> List[dict]:
        return self.tables.get(name, [])

    def row(self, table: str, **match) -> dict:
        for r in self.table(table):
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(f"no row in {table!r} matching {match}")

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "seed": self.seed,
            "settings": dict(self.settings),
            "summary": self.summary,
            "tables": self.tables,
        }


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def report_json(report: ExperimentReport) -> str:
    return json.dumps(_plain(report.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_cell(value) -> str:
    value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def table_csv(rows: Sequence[dict]) -> str:
    import csv
    import io

    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(c)) for c in columns])
    return buf.getvalue()


PLOT_TABLES = {
    "plot_accuracy_vs_ratio": ("ratios", ("seed", "ratio", "baseline_gt_rate", "dynamic_gt_rate", "delta")),
    "plot_benefit_damage_vs_judge_accuracy": (
        "noise", ("seed", "sigma", "judge_accuracy", "benefit_damage_ratio")),
    "plot_judge_accuracy_vs_improvement": ("judge_quality", ("seed", "bias_type", "judge_accuracy", "delta")),
}


def write_report(report: ExperimentReport, out_dir) -> List[Path]:
    """Write report.json, report.csv (per-arm rows), one CSV per table and the plot-data CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, text):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    emit("report.json", report_json(report))
    emit("report.csv", table_csv(report.table("arms")))
    for name in sorted(report.tables):
        emit(f"{name}.csv", table_csv(report.tables[name]))
    for plot, (source, columns) in PLOT_TABLES.items():
        if report.table(source):
            emit(f"{plot}.csv", table_csv([{c: r.get(c) for c in columns} for r in report.table(source)]))
    return written


# -- comparison tables -----------------------------------------------------

def _win_rate(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.where(a > b, 1.0, np.where(a == b, 0.5, 0.0))))


def compare(arm: ArmOutcome, ref: ArmOutcome, cfg: ExperimentConfig) -> dict:
    if arm.question_ids != ref.question_ids:
        raise DataError(f"arms {arm.arm} and {ref.arm} were evaluated on different questions")
    stats = paired_summary(
        PairedSample(arm.question_ids, arm.gt_rates, ref.gt_rates), cfg.bootstrap_iterations, cfg.seed
    )
    win = math.nan
    if arm.debiased_reward is not None and ref.debiased_reward is not None:
        win = _win_rate(arm.debiased_reward, ref.debiased_reward)
    return {"seed": cfg.seed, "arm": arm.arm, "reference": ref.arm, **stats, "win_rate": win}


def arm_row(o: ArmOutcome, beta: BetaConfig, ratio: str) -> dict:
    return {
        "seed": o.seed,
        "arm": o.arm,
        "ratio": ratio,
        "k": float(beta.k),
        "theta": float(beta.theta),
        "n_test": len(o.question_ids),
        "gt_rate": o.gt_rate,
        "cb_rate": o.cb_rate,
        "unparseable_rate": o.unparseable_rate,
        "rm_accuracy": o.rm_accuracy,
        "mean_beta_gt_chosen": o.mean_beta_gt_chosen,
        "mean_beta_cb_chosen": o.mean_beta_cb_chosen,
    }


def per_type_rows(outcomes: Sequence[ArmOutcome], baseline: Optional[ArmOutcome], ratio: str) -> List[dict]:
    rows = []
    for o in outcomes:
        types = np.asarray(o.bias_types)
        for t in sorted(set(o.bias_types)):
            mask = types == t
            gt = float(np.mean(o.gt_rates[mask]))
            delta = math.nan if baseline is None else gt - float(np.mean(baseline.gt_rates[mask]))
            rows.append({"seed": o.seed, "arm": o.arm, "ratio": ratio, "bias_type": t,
                         "n": int(mask.sum()), "gt_rate": gt, "delta_vs_baseline": delta})
    return rows


def assemble_comparison(outcomes: Mapping[str, ArmOutcome], cfg: ExperimentConfig, beta: BetaConfig,
                        sweep: Optional[SweepResult] = None, ratio: Optional[str] = None) -> Dict[str, List[dict]]:
    """Per-arm rows, paired stats vs the baseline, dynamic vs every arm, per-type breakdown."""
    ratio = cfg.ratio.label if ratio is None else ratio
    arms = [a for a in cfg.arms if a in outcomes]
    base = outcomes.get(cfg.baseline)
    tables = {
        "arms": [arm_row(outcomes[a], beta, ratio) for a in arms],
        "comparisons": [dict(compare(outcomes[a], base, cfg), ratio=ratio) for a in arms
                        if base is not None and a != cfg.baseline],
        "per_type": per_type_rows([outcomes[a] for a in arms], base, ratio),
    }
    if DYNAMIC in outcomes:
        tables["dynamic_vs_arms"] = [dict(compare(outcomes[DYNAMIC], outcomes[a], cfg), ratio=ratio)
                                     for a in arms if a != DYNAMIC]
    if sweep is not None:
        tables["sweep"] = [dict(seed=cfg.seed, ratio=ratio, **row) for row in sweep.table]
    return tables


def _merge(tables: Dict[str, List[dict]], more: Mapping[str, List[dict]]) -> None:
    for name, rows in more.items():
        tables.setdefault(name, []).extend(rows)


def comparison_summary(tables: Mapping[str, List[dict]], cfg: ExperimentConfig) -> dict:
    gt = {r["arm"]: r["gt_rate"] for r in tables["arms"]}
    summary: Dict[str, object] = {"gt_rate": gt, "baseline": cfg.baseline}
    dyn = tables.get("dynamic_vs_arms", [])
    if dyn:
        summary["dynamic_min_margin"] = min(r["delta"] for r in dyn)
        summary["dynamic_max_wilcoxon_p"] = max(r["wilcoxon_p"] for r in dyn)
    return summary


# -- designs ---------------------------------------------------------------

def run_baseline_comparison(cfg: ExperimentConfig, client: Optional[ExternalJudge] = None) -> ExperimentReport:
    prep = prepare(cfg, client)
    runs = run_arms(prep, cfg)
    tables = assemble_comparison({a: r.outcome for a, r in runs.items()}, cfg, prep.beta, prep.sweep)
    summary = comparison_summary(tables, cfg)
    summary.update(k=float(prep.beta.k), theta=float(prep.beta.theta), calibration=prep.calibration)
    return ExperimentReport("baseline_comparison", cfg.seed, tables, summary, cfg.settings)


def run_ratio_sensitivity(cfg: ExperimentConfig, client: Optional[ExternalJudge] = None) -> ExperimentReport:
    """Dynamic vs the baseline arm at each configured corruption ratio."""
    tables: Dict[str, List[dict]] = {"ratios": []}
    arms = tuple(dict.fromkeys((DYNAMIC, cfg.baseline)))
    for label in cfg.ratios:
        sub = dataclasses.replace(cfg, ratio=parse_ratio(label), arms=arms)
        prep = prepare(sub, client)
        runs = run_arms(prep, sub)
        part = assemble_comparison({a: r.outcome for a, r in runs.items()}, sub, prep.beta, prep.sweep, label)
        cmp_row = next(r for r in part["comparisons"] if r["arm"] == DYNAMIC)
        tables["ratios"].append({
            "seed": cfg.seed,
            "ratio": label,
            "k": float(prep.beta.k),
            "theta": float(prep.beta.theta),
            "baseline_gt_rate": runs[cfg.baseline].outcome.gt_rate,
            "dynamic_gt_rate": runs[DYNAMIC].outcome.gt_rate,
            **{key: cmp_row[key] for key in ("delta", "ci_lo", "ci_hi", "wilcoxon_p", "cohens_d", "win_rate", "n")},
        })
        _merge(tables, part)
    fixed = [r for r in tables["ratios"] if parse_ratio(r["ratio"]).mode is RatioMode.FIXED]
    fixed.sort(key=lambda r: parse_ratio(r["ratio"]).cb_pairs / max(parse_ratio(r["ratio"]).gt_pairs, 1))
    base = [r["baseline_gt_rate"] for r in fixed]
    summary = {
        "all_delta_positive": all(r["delta"] > 0 for r in tables["ratios"]),
        "baseline_monotone_non_improving": all(b <= a for a, b in zip(base, base[1:])),
        "delta": {r["ratio"]: r["delta"] for r in tables["ratios"]},
    }
    return ExperimentReport("ratio_sensitivity", cfg.seed, tables, summary, cfg.settings)


def judge_accuracy_mc(sigma: float, judge: JudgeConfig, z: np.ndarray) -> float:
    """Monte Carlo pairwise accuracy of the oracle after logit noise ``sigma``."""
    gt = perturb_score(judge.low_score, sigma * z[:, 0])
    cb = perturb_score(judge.high_score, sigma * z[:, 1])
    return float(np.mean(np.where(cb > gt, 1.0, np.where(cb == gt, 0.5, 0.0))))


def sigma_for_accuracy(target: float, judge: JudgeConfig, seed: int = 42, draws: int = 20_000,
                       tol: float = 1e-6) -> float:
    """Noise level whose Monte Carlo judge accuracy equals ``target``, by bisection.

    Accuracy falls toward 0.5 as sigma grows; targets at or below the accuracy
    reached at ``SIGMA_MAX`` return ``SIGMA_MAX``.
    """
    if not 0.5 <= target <= 1.0:
        raise ConfigError(f"target accuracy {target} outside [0.5, 1]")
    if target >= 1.0:
        return 0.0
    z = rng_for(seed, "experiment.sigma_search").standard_normal((draws, 2))
    if judge_accuracy_mc(SIGMA_MAX, judge, z) >= target:
        return SIGMA_MAX
    lo, hi = 0.0, 1.0
    while judge_accuracy_mc(hi, judge, z) > target:
        lo, hi = hi, hi * 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = (lo + hi) / 2.0
        if judge_accuracy_mc(mid, judge, z) > target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def noise_probe_questions(cfg: ExperimentConfig) -> List[Question]:
    if cfg.questions_csv:
        return load_questions_csv(cfg.questions_csv)
    return generate_questions(dataclasses.replace(cfg.synth, num_questions=cfg.noise_questions))[0]


def run_noise_robustness(cfg: ExperimentConfig, targets: Optional[Sequence[float]] = None) -> ExperimentReport:
    """Recompute dynamic betas under growing judge noise and track the benefit/damage ratio."""
    if cfg.judge.kind is JudgeKind.EXTERNAL:
        raise ConfigError("the noise probe perturbs the oracle judge; set judge.kind to oracle")
    targets = tuple(cfg.noise_targets if targets is None else targets)
    questions = noise_probe_questions(cfg)
    pairs = corrupt_to_pairs(questions, cfg.ratio, cfg.val_pair_seed)
    clean = score_questions(questions, dataclasses.replace(cfg.judge, kind=JudgeKind.ORACLE))
    beta = dataclasses.replace(cfg.beta.resolve([s for v in clean.values() for s in v]), mode=BetaMode.DYNAMIC)
    rows = []
    for target in targets:
        sigma = sigma_for_accuracy(target, cfg.judge, cfg.seed)
        judge = dataclasses.replace(cfg.judge, kind=JudgeKind.NOISY, noise_sigma=sigma, type_sigmas={})
        scores = score_questions(questions, judge)
        weighted = assign_betas(attach_scores(pairs, scores), beta)
        correct = judge_correctness(scores)
        row = {
            "seed": cfg.seed,
            "arm": DYNAMIC,
            "target_accuracy": float(target),
            "sigma": sigma,
            "judge_accuracy": pairwise_judge_accuracy(scores),
            "benefit_damage_ratio": benefit_damage_ratio(weighted, correct),
            "n_questions": len(questions),
            "n_flipped": sum(1 for c in correct.values() if not c),
            "k": float(beta.k),
            "theta": float(beta.theta),
        }
        if cfg.noise_retrain:
            sub = dataclasses.replace(cfg, judge=judge, arms=tuple(dict.fromkeys((DYNAMIC, cfg.baseline))))
            prep = prepare(sub)
            runs = run_arms(prep, sub)
            row["dynamic_gt_rate"] = runs[DYNAMIC].outcome.gt_rate
            row["baseline_gt_rate"] = runs[cfg.baseline].outcome.gt_rate
        rows.append(row)
    finite = [r["benefit_damage_ratio"] for r in rows if math.isfinite(r["benefit_damage_ratio"])]
    by_acc = sorted(rows, key=lambda r: r["judge_accuracy"])
    summary = {
        "all_finite_ratios_above_one": all(r > 1.0 for r in finite),
        "ratio_at_highest_accuracy": by_acc[-1]["benefit_damage_ratio"] if rows else math.nan,
        "ratio_at_lowest_accuracy": by_acc[0]["benefit_damage_ratio"] if rows else math.nan,
        "accuracy_range": [by_acc[0]["judge_accuracy"], by_acc[-1]["judge_accuracy"]] if rows else [],
    }
    return ExperimentReport("noise_robustness", cfg.seed, {"noise": rows}, summary, cfg.settings)


def run_ablation_scenario(cfg: ExperimentConfig, client: Optional[ExternalJudge] = None) -> ExperimentReport:
    """Scenario-scaled, response-only and scenario-only weights against the baseline."""
    sub = dataclasses.replace(cfg, arms=tuple(dict.fromkeys((cfg.baseline,) + ABLATION_ARMS[1:])))
    report = run_baseline_comparison(sub, client)
    report.design = "ablation_scenario"
    report.summary["delta"] = {r["arm"]: r["delta"] for r in report.table("comparisons")}
    report.summary["wilcoxon_p"] = {r["arm"]: r["wilcoxon_p"] for r in report.table("comparisons")}
    return report


def quality_targets(cfg: ExperimentConfig) -> Dict[str, float]:
    lo, hi = cfg.quality_accuracy_range
    values = np.linspace(lo, hi, cfg.quality_types)
    return {bias_type_name(t): float(v) for t, v in enumerate(values)}


def run_judge_quality_correlation(cfg: ExperimentConfig) -> ExperimentReport:
    """Give each bias type its own judge noise and correlate judge accuracy with the GT-rate gain."""
    if cfg.questions_csv:
        raise ConfigError("the judge-quality design generates its own bias types; drop questions_csv")
    targets = quality_targets(cfg)
    sigmas = {t: sigma_for_accuracy(a, cfg.judge, cfg.seed) for t, a in targets.items()}
    synth = dataclasses.replace(cfg.synth, num_bias_types=cfg.quality_types, num_questions=cfg.quality_questions)
    judge = dataclasses.replace(cfg.judge, kind=JudgeKind.NOISY, type_sigmas=sigmas)
    sub = dataclasses.replace(cfg, synth=synth, judge=judge, arms=tuple(dict.fromkeys((DYNAMIC, cfg.baseline))))
    prep = prepare(sub)
    runs = run_arms(prep, sub)
    tables = assemble_comparison({a: r.outcome for a, r in runs.items()}, sub, prep.beta, prep.sweep)
    accuracy = per_type_accuracy(prep.train, prep.scores)
    deltas = {r["bias_type"]: r for r in tables["per_type"] if r["arm"] == DYNAMIC}
    base = {r["bias_type"]: r for r in tables["per_type"] if r["arm"] == sub.baseline}
    rows = []
    for t in sorted(targets):
        rows.append({
            "seed": cfg.seed,
            "bias_type": t,
            "target_accuracy": targets[t],
            "sigma": sigmas[t],
            "judge_accuracy": accuracy[t],
            "baseline_gt_rate": base[t]["gt_rate"],
            "dynamic_gt_rate": deltas[t]["gt_rate"],
            "delta": deltas[t]["delta_vs_baseline"],
            "n_test": deltas[t]["n"],
        })
    tables["judge_quality"] = rows
    acc = [r["judge_accuracy"] for r in rows]
    gain = [r["delta"] for r in rows]
    rho = spearman_rho(acc, gain)
    best = max(rows, key=lambda r: (r["delta"], r["judge_accuracy"]))
    top_acc = max(acc)
    summary = {
        "spearman_rho": rho,
        "spearman_p": spearman_pvalue(rho, len(rows)),
        "min_delta": min(gain),
        "n_types": len(rows),
        "most_accurate_type_has_max_delta": max(r["delta"] for r in rows if r["judge_accuracy"] == top_acc)
        >= best["delta"],
        "k": float(prep.beta.k),
        "theta": float(prep.beta.theta),
    }
    return ExperimentReport("judge_quality_correlation", cfg.seed, tables, summary, sub.settings)


DESIGNS = {
    "baseline": run_baseline_comparison,
    "ratios": run_ratio_sensitivity,
    "noise": run_noise_robustness,
    "ablation": run_ablation_scenario,
    "judge_quality": run_judge_quality_correlation,
}


def run_design(name: str, cfg: ExperimentConfig, client: Optional[ExternalJudge] = None) -> ExperimentReport:
    try:
        fn = DESIGNS[name]
    except KeyError:
        raise ConfigError(f"unknown experiment design {name!r}; choose from {sorted(DESIGNS)}") from None
    if name in ("baseline", "ratios", "ablation"):
        return fn(cfg, client)
    return fn(cfg)

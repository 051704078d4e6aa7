"""Command-line entry point.

Each stage reads the previous stage's files from ``--out`` and writes its own
outputs there, together with ``manifest_<stage>.json`` recording the config
hash, seeds and SHA-256 of every input and output. ``full`` runs the stages in
order against one directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from dynbeta import __version__
from dynbeta.analysis import SweepResult
from dynbeta.config import build_config, load_settings, settings_hash, settings_yaml
from dynbeta.data import (
    corrupt_to_pairs,
    load_pairs_csv,
    load_questions_csv,
    load_scores_csv,
    split_stratified,
    write_pairs_csv,
    write_questions_csv,
    write_scores_csv,
)
from dynbeta.errors import DataError, LabError
from dynbeta.experiment import (
    DYNAMIC,
    ArmOutcome,
    ExperimentConfig,
    ExperimentReport,
    _plain,
    arm_pairs,
    assemble_comparison,
    comparison_summary,
    load_dataset,
    outcome_from,
    run_design,
    score_and_pair,
    select_beta,
    train_arm_policy,
    train_arm_rm,
    with_arm_context,
    write_report,
)
from dynbeta.judge import attach_scores, load_calibration, save_calibration
from dynbeta.policy import eval_answers, load_policy, mean_shaped_reward, save_policy
from dynbeta.reward import load_reward_model, save_reward_model

log = logging.getLogger("dynbeta")

STAGES = ("generate", "judge", "sweep", "train-rm", "train-policy", "evaluate", "analyze")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"required input not found: {path}")
    return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_manifest(stage: str, cfg: ExperimentConfig, out: Path, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    manifest = {
        "stage": stage,
        "version": __version__,
        "config_hash": settings_hash(cfg.settings),
        "settings": dict(cfg.settings),
        "seeds": {"master": cfg.seed, "pairs": cfg.pair_seed, "validation_pairs": cfg.val_pair_seed},
        "inputs": {p.name: sha256_file(p) for p in inputs},
        "outputs": {p.name: sha256_file(p) for p in outputs},
    }
    path = out / f"manifest_{stage}.json"
    _dump_json(manifest, path)
    return path


def _arm_file(prefix: str, arm: str, ext: str) -> str:
    return f"{prefix}_{arm}.{ext}"


# -- stages ----------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, out: Path) -> List[Path]:
    inputs = [_require(Path(cfg.questions_csv))] if cfg.questions_csv else []
    questions = load_dataset(cfg)
    train, val, test = split_stratified(questions, cfg.split)
    outputs = []
    for name, qs in (("questions", questions), ("train", train), ("val", val), ("test", test)):
        path = out / f"{name}.csv"
        write_questions_csv(qs, path)
        outputs.append(path)
    pairs_path = out / "pairs.csv"
    write_pairs_csv(corrupt_to_pairs(train, cfg.ratio, cfg.pair_seed), pairs_path)
    outputs.append(pairs_path)
    write_manifest("generate", cfg, out, inputs, outputs)
    return outputs


def cmd_judge(cfg: ExperimentConfig, out: Path) -> List[Path]:
    inputs = [_require(out / n) for n in ("train.csv", "val.csv", "pairs.csv")]
    train, val = load_questions_csv(inputs[0]), load_questions_csv(inputs[1])
    scores, cmap, _ = score_and_pair(cfg, train, val)
    pairs = attach_scores(load_pairs_csv(inputs[2], train), scores)
    outputs = [out / "scores.csv", out / "pairs_scored.csv"]
    write_scores_csv(list(train) + list(val), scores, outputs[0])
    write_pairs_csv(pairs, outputs[1])
    if cmap is not None:
        outputs.append(out / "calibration.json")
        save_calibration(cmap, outputs[-1])
    write_manifest("judge", cfg, out, inputs, outputs)
    return outputs


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> List[Path]:
    inputs = [_require(out / n) for n in ("train.csv", "val.csv", "scores.csv", "pairs_scored.csv")]
    train, val = load_questions_csv(inputs[0]), load_questions_csv(inputs[1])
    scores = load_scores_csv(inputs[2])
    pairs = load_pairs_csv(inputs[3], train)
    beta, sweep = select_beta(cfg, train, val, scores, pairs)
    path = out / "beta.json"
    _dump_json({"k": float(beta.k), "theta": float(beta.theta), "sweep": sweep.table if sweep else None}, path)
    write_manifest("sweep", cfg, out, inputs, [path])
    return [path]


def _load_beta(cfg: ExperimentConfig, out: Path):
    payload = json.loads(_require(out / "beta.json").read_text(encoding="utf-8"))
    beta = dataclasses.replace(cfg.beta, k=float(payload["k"]), theta=float(payload["theta"]))
    sweep = None
    if payload.get("sweep") is not None:
        sweep = SweepResult(beta.k, beta.theta, payload["sweep"])
    return beta, sweep


def cmd_train_rm(cfg: ExperimentConfig, out: Path) -> List[Path]:
    inputs = [_require(out / n) for n in ("pairs_scored.csv", "train.csv", "scores.csv", "beta.json")]
    train = load_questions_csv(inputs[1])
    pairs = load_pairs_csv(inputs[0], train)
    scores = load_scores_csv(inputs[2])
    beta, _ = _load_beta(cfg, out)
    outputs = []
    for arm in cfg.ordered_arms():
        try:
            weighted = arm_pairs(arm, pairs, beta, cfg.seed, train, scores)
            model = train_arm_rm(arm, weighted, train, cfg)
        except LabError as exc:
            raise with_arm_context(arm, exc)
        pairs_path, rm_path = out / _arm_file("pairs", arm, "csv"), out / _arm_file("rm", arm, "json")
        write_pairs_csv(weighted, pairs_path)
        save_reward_model(model, rm_path)
        outputs += [pairs_path, rm_path]
    write_manifest("train-rm", cfg, out, inputs, outputs)
    return outputs


def cmd_train_policy(cfg: ExperimentConfig, out: Path) -> List[Path]:
    train_path = _require(out / "train.csv")
    train = load_questions_csv(train_path)
    inputs, outputs = [train_path], []
    for arm in cfg.ordered_arms():
        rm_path = _require(out / _arm_file("rm", arm, "json"))
        inputs.append(rm_path)
        model = load_reward_model(rm_path, train[0].dim)
        try:
            policy = train_arm_policy(model, train, cfg)
        except LabError as exc:
            raise with_arm_context(arm, exc)
        path = out / _arm_file("policy", arm, "json")
        save_policy(policy, path)
        outputs.append(path)
    write_manifest("train-policy", cfg, out, inputs, outputs)
    return outputs


EVAL_COLUMNS = ("question_id", "bias_type", "gt_rate", "debiased_reward")


def _write_eval(outcome: ArmOutcome, out: Path) -> List[Path]:
    csv_path = out / _arm_file("eval", outcome.arm, "csv")
    lines = [",".join(EVAL_COLUMNS)]
    reward = outcome.debiased_reward
    for i, (qid, t) in enumerate(zip(outcome.question_ids, outcome.bias_types)):
        r = "" if reward is None else repr(float(reward[i]))
        lines.append(f"{qid},{t},{float(outcome.gt_rates[i])!r},{r}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    json_path = out / _arm_file("eval", outcome.arm, "json")
    _dump_json({
        "arm": outcome.arm,
        "seed": outcome.seed,
        "rm_accuracy": outcome.rm_accuracy,
        "cb_rate": outcome.cb_rate,
        "unparseable_rate": outcome.unparseable_rate,
        "mean_beta_gt_chosen": outcome.mean_beta_gt_chosen,
        "mean_beta_cb_chosen": outcome.mean_beta_cb_chosen,
    }, json_path)
    return [csv_path, json_path]


def _read_eval(arm: str, out: Path) -> ArmOutcome:
    meta = json.loads(_require(out / _arm_file("eval", arm, "json")).read_text(encoding="utf-8"))
    with open(_require(out / _arm_file("eval", arm, "csv")), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    rewards = [r["debiased_reward"] for r in rows]
    return ArmOutcome(
        arm=meta["arm"],
        seed=int(meta["seed"]),
        question_ids=tuple(r["question_id"] for r in rows),
        bias_types=tuple(r["bias_type"] for r in rows),
        gt_rates=np.array([float(r["gt_rate"]) for r in rows]),
        rm_accuracy=float(meta["rm_accuracy"]),
        cb_rate=float(meta["cb_rate"]),
        unparseable_rate=float(meta["unparseable_rate"]),
        mean_beta_gt_chosen=float(meta["mean_beta_gt_chosen"]),
        mean_beta_cb_chosen=float(meta["mean_beta_cb_chosen"]),
        debiased_reward=None if any(v == "" for v in rewards) else np.array([float(v) for v in rewards]),
    )


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> List[Path]:
    test_path, train_path = _require(out / "test.csv"), _require(out / "train.csv")
    test, train = load_questions_csv(test_path), load_questions_csv(train_path)
    inputs = [test_path, train_path]
    arms = cfg.ordered_arms()
    outcomes, answers = {}, {}
    judge_model = None
    for arm in arms:
        paths = [_require(out / _arm_file(p, arm, e)) for p, e in (("policy", "json"), ("rm", "json"), ("pairs", "csv"))]
        inputs += paths
        policy = load_policy(paths[0])
        model = load_reward_model(paths[1], test[0].dim)
        pairs = load_pairs_csv(paths[2], train)
        answers[arm] = eval_answers(policy, test, cfg.grpo.eval_samples, cfg.seed, cfg.grpo.greedy_eval)
        outcomes[arm] = outcome_from(arm, cfg, pairs, model, answers[arm], test)
        if arm == DYNAMIC:
            judge_model = model
    outputs = []
    for arm in arms:
        if judge_model is not None:
            outcomes[arm].debiased_reward = mean_shaped_reward(answers[arm], test, judge_model, cfg.grpo)
        outputs += _write_eval(outcomes[arm], out)
    write_manifest("evaluate", cfg, out, inputs, outputs)
    return outputs


def cmd_analyze(cfg: ExperimentConfig, out: Path) -> List[Path]:
    beta, sweep = _load_beta(cfg, out)
    inputs = [out / "beta.json"]
    outcomes = {}
    for arm in cfg.ordered_arms():
        outcomes[arm] = _read_eval(arm, out)
        inputs += [out / _arm_file("eval", arm, "csv"), out / _arm_file("eval", arm, "json")]
    calibration = None
    if (out / "calibration.json").exists():
        calibration = load_calibration(out / "calibration.json")
        inputs.append(out / "calibration.json")
    tables = assemble_comparison(outcomes, cfg, beta, sweep)
    summary = comparison_summary(tables, cfg)
    summary.update(k=float(beta.k), theta=float(beta.theta), calibration=calibration)
    report = ExperimentReport("baseline_comparison", cfg.seed, tables, summary, cfg.settings)
    outputs = write_report(report, out / "report")
    write_manifest("analyze", cfg, out, inputs, outputs)
    return outputs


def cmd_full(cfg: ExperimentConfig, out: Path) -> List[Path]:
    outputs = []
    for stage in STAGES:
        outputs += STAGE_FUNCS[stage](cfg, out)
    return outputs


def cmd_experiment(cfg: ExperimentConfig, out: Path, design: str) -> List[Path]:
    report = run_design(design, cfg)
    outputs = write_report(report, out)
    write_manifest(f"experiment_{design}", cfg, out, [Path(cfg.questions_csv)] if cfg.questions_csv else [], outputs)
    return outputs


STAGE_FUNCS = {
    "generate": cmd_generate,
    "judge": cmd_judge,
    "sweep": cmd_sweep,
    "train-rm": cmd_train_rm,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "full": cmd_full,
}


# -- argument handling -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
    common.add_argument("--out", default="runs/default", help="output directory shared by all stages")
    common.add_argument("--seed", type=int, help="master seed; overrides the config's seed")
    common.add_argument("--jobs", type=int, help="worker processes for independent arms")
    common.add_argument("--judge-endpoint", help="URL of an external pairwise judge (switches judge.kind)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key; repeatable")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dynbeta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "full"):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "full" else "run every stage")
    exp = sub.add_parser("experiment", parents=[common], help="run one study design end to end")
    exp.add_argument("--design", required=True, choices=["baseline", "ratios", "noise", "ablation", "judge_quality"])
    sub.add_parser("show-config", parents=[common], help="print the effective config as YAML")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"experiment.jobs={args.jobs}")
    if args.judge_endpoint:
        overrides += ["judge.kind=external", f"judge.endpoint={args.judge_endpoint}"]
    return build_config(load_settings(args.config, overrides))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(settings_yaml(cfg.settings))
            return 0
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "experiment":
            written = cmd_experiment(cfg, out, args.design)
        else:
            written = STAGE_FUNCS[args.command](cfg, out)
    except LabError as exc:
        print(f"dynbeta: error: {exc}", file=sys.stderr)
        return exc.exit_code
    for path in written:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

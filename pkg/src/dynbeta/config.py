"""Dotted-key configuration: defaults, YAML files and ``key=value`` overrides.

A config file is nested YAML whose flattened keys must all exist in
:data:`DEFAULTS`. Values are coerced to the type of the default, so a typo
or a wrong type fails loudly instead of silently using the default.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import yaml

from dynbeta.analysis import SweepGrid
from dynbeta.core import BetaConfig, BetaMode
from dynbeta.data import PairRatioConfig, SplitConfig, SynthConfig
from dynbeta.errors import ConfigError, LabError
from dynbeta.experiment import ExperimentConfig
from dynbeta.judge import JudgeConfig
from dynbeta.policy import GrpoConfig
from dynbeta.reward import RmTrainConfig

DEFAULTS: Dict[str, object] = {
    "seed": 42,
    "data.source": "synthetic",
    "data.questions_csv": None,
    "data.num_questions": 500,
    "data.feature_dim": 16,
    "data.margin": 1.0,
    "data.num_bias_types": 4,
    "data.salience_min": 0.3,
    "data.salience_max": 1.0,
    "data.salience_scale": 1.5,
    "data.noise_scale": 0.5,
    "split.train": 0.8,
    "split.val": 0.1,
    "split.test": 0.1,
    "split.stratify_by": "bias_type",
    "pairs.mode": "fixed",
    "pairs.gt_pairs": 1,
    "pairs.cb_pairs": 3,
    "pairs.max_cb": 3,
    "mistake.k": 30.0,
    "mistake.threshold": 0.40,
    "mistake.random_per_question": False,
    "sweep.enabled": True,
    "sweep.k": [10.0, 30.0, 100.0],
    "sweep.threshold": [0.3, 0.4, 0.5],
    "sweep.objective": "rm_val_accuracy",
    "judge.kind": "oracle",
    "judge.high_score": 0.8,
    "judge.low_score": 0.2,
    "judge.noise_sigma": 0.0,
    "judge.endpoint": None,
    "judge.timeout": 10.0,
    "judge.max_retries": 3,
    "judge.backoff": 0.5,
    "judge.max_in_flight": 4,
    "judge.calibrate": False,
    "judge.calibration_min_per_type": 20,
    "reward.arch": "linear",
    "reward.hidden_width": 8,
    "reward.epochs": 3,
    "reward.batch_size": 8,
    "reward.learning_rate": 0.01,
    "reward.grad_accum": 1,
    "reward.l2": 0.0001,
    "reward.init_scale": 0.01,
    "grpo.num_generations": 4,
    "grpo.kl_coef": 0.04,
    "grpo.format_reward_bonus": 2.0,
    "grpo.epochs": 2,
    "grpo.learning_rate": 0.5,
    "grpo.batch_size": 4,
    "grpo.temperature": 0.7,
    "grpo.unparseable_prob": 0.02,
    "evaluation.n_samples": 10,
    "evaluation.greedy": False,
    "evaluation.bootstrap_iterations": 10000,
    "experiment.arms": ["dynamic", "fixed_0.1", "fixed_0.5", "fixed_0.9", "fixed_1.0", "random"],
    "experiment.baseline": "fixed_1.0",
    "experiment.train_order": "debiased_first",
    "experiment.jobs": 1,
    "experiment.ratios": ["1:1", "1:3", "1:5", "random:3"],
    "experiment.noise_targets": [0.83, 0.77, 0.70, 0.63, 0.57],
    "experiment.noise_questions": 2000,
    "experiment.noise_retrain": False,
    "experiment.quality_types": 10,
    "experiment.quality_questions": 2000,
    "experiment.quality_accuracy_min": 0.5,
    "experiment.quality_accuracy_max": 1.0,
}

# keys whose default is None accept a string; the threshold also accepts "auto"
_OPTIONAL_STR = {"data.questions_csv", "judge.endpoint"}


def flatten(tree: Mapping, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def nest(flat: Mapping[str, object]) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return tree


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in _OPTIONAL_STR:
        if value is None or isinstance(value, str):
            return value
    elif key == "mistake.threshold":
        if value == "auto":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            kind = type(default[0])
            if kind is float:
                if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                    return [float(v) for v in value]
            elif all(isinstance(v, kind) for v in value):
                return list(value)
    raise ConfigError(f"config key {key}: value {value!r} has the wrong type (default is {default!r})")


def _check_keys(flat: Mapping[str, object], where: str) -> None:
    unknown = sorted(k for k in flat if k not in DEFAULTS)
    if unknown:
        raise ConfigError(f"{where}: unknown config key(s) {', '.join(unknown)}")


def parse_override(text: str):
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key, value


def load_settings(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Dict[str, object]:
    """Defaults, then the YAML file at ``path``, then each ``key=value`` override."""
    settings = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(tree, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        flat = flatten(tree)
        _check_keys(flat, str(path))
        settings.update({k: _coerce(k, v) for k, v in flat.items()})
    for text in overrides:
        key, value = parse_override(text)
        _check_keys({key: value}, "override")
        settings[key] = _coerce(key, value)
    return settings


def settings_hash(settings: Mapping[str, object]) -> str:
    blob = json.dumps(dict(settings), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def settings_yaml(settings: Mapping[str, object]) -> str:
    return yaml.safe_dump(nest(settings), sort_keys=False, default_flow_style=False)


def default_yaml() -> str:
    return settings_yaml(DEFAULTS)


def build_config(settings: Mapping[str, object]) -> ExperimentConfig:
    """Turn validated flat settings into an :class:`ExperimentConfig`."""
    s = dict(settings)
    _check_keys(s, "settings")
    try:
        source = s["data.source"]
        if source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if source == "csv" and not s["data.questions_csv"]:
            raise ConfigError("data.source is csv but data.questions_csv is not set")
        return ExperimentConfig(
            seed=s["seed"],
            synth=SynthConfig(
                num_questions=s["data.num_questions"],
                feature_dim=s["data.feature_dim"],
                margin=s["data.margin"],
                bias_salience_range=(s["data.salience_min"], s["data.salience_max"]),
                num_bias_types=s["data.num_bias_types"],
                salience_scale=s["data.salience_scale"],
                noise_scale=s["data.noise_scale"],
            ),
            questions_csv=s["data.questions_csv"] if source == "csv" else None,
            split=SplitConfig(s["split.train"], s["split.val"], s["split.test"], s["split.stratify_by"]),
            ratio=PairRatioConfig(s["pairs.mode"], s["pairs.gt_pairs"], s["pairs.cb_pairs"], s["pairs.max_cb"]),
            arms=tuple(s["experiment.arms"]),
            baseline=s["experiment.baseline"],
            beta=BetaConfig(BetaMode.DYNAMIC, k=s["mistake.k"], theta=s["mistake.threshold"],
                            per_question=s["mistake.random_per_question"]),
            sweep=SweepGrid(tuple(s["sweep.k"]), tuple(s["sweep.threshold"]), s["sweep.objective"])
            if s["sweep.enabled"] else None,
            judge=JudgeConfig(
                kind=s["judge.kind"],
                high_score=s["judge.high_score"],
                low_score=s["judge.low_score"],
                noise_sigma=s["judge.noise_sigma"],
                endpoint_url=s["judge.endpoint"],
                request_timeout=s["judge.timeout"],
                max_retries=s["judge.max_retries"],
                backoff=s["judge.backoff"],
                max_in_flight=s["judge.max_in_flight"],
            ),
            calibrate_judge=s["judge.calibrate"],
            calibration_min_per_type=s["judge.calibration_min_per_type"],
            rm=RmTrainConfig(
                arch=s["reward.arch"],
                hidden_width=s["reward.hidden_width"],
                epochs=s["reward.epochs"],
                batch_size=s["reward.batch_size"],
                learning_rate=s["reward.learning_rate"],
                grad_accum=s["reward.grad_accum"],
                l2=s["reward.l2"],
                init_scale=s["reward.init_scale"],
            ),
            grpo=GrpoConfig(
                num_generations=s["grpo.num_generations"],
                kl_coef=s["grpo.kl_coef"],
                format_bonus=s["grpo.format_reward_bonus"],
                epochs=s["grpo.epochs"],
                learning_rate=s["grpo.learning_rate"],
                batch_size=s["grpo.batch_size"],
                eval_samples=s["evaluation.n_samples"],
                temperature=s["grpo.temperature"],
                unparseable_prob=s["grpo.unparseable_prob"],
                greedy_eval=s["evaluation.greedy"],
            ),
            bootstrap_iterations=s["evaluation.bootstrap_iterations"],
            ratios=tuple(s["experiment.ratios"]),
            noise_targets=tuple(s["experiment.noise_targets"]),
            noise_questions=s["experiment.noise_questions"],
            noise_retrain=s["experiment.noise_retrain"],
            quality_types=s["experiment.quality_types"],
            quality_questions=s["experiment.quality_questions"],
            quality_accuracy_range=(s["experiment.quality_accuracy_min"], s["experiment.quality_accuracy_max"]),
            train_order=s["experiment.train_order"],
            jobs=s["experiment.jobs"],
            settings=dict(s),
        )
    except LabError:
        raise
    except ValueError as exc:
        # enum constructors reject unknown names with ValueError
        raise ConfigError(str(exc)) from None

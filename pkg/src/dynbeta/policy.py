"""Toy group-relative policy optimization over two-option answers.

Each question offers a gt and a cb answer. The policy scores both with a
linear function of the answer features and samples from a tempered softmax;
with probability ``unparseable_prob`` the sample is unusable instead.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from dynbeta.core import Question, rng_for
from dynbeta.errors import ConfigError, DataError, TrainingError
from dynbeta.reward import RewardModel

log = logging.getLogger(__name__)

ADV_EPS = 1e-8


class Answer(enum.IntEnum):
    GT = 0
    CB = 1
    UNPARSEABLE = 2


@dataclass
class Policy:
    v: np.ndarray
    temperature: float = 0.7
    unparseable_prob: float = 0.02
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        self.v = np.array(self.v, dtype=float)
        if self.reference is None:
            self.reference = self.v.copy()
        self.reference = np.array(self.reference, dtype=float)
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.unparseable_prob < 1.0:
            raise ConfigError("unparseable_prob must lie in [0, 1)")
        if self.reference.shape != self.v.shape:
            raise ConfigError("reference parameters must match the policy shape")

    @classmethod
    def zeros(cls, dim: int, temperature: float = 0.7, unparseable_prob: float = 0.02) -> "Policy":
        return cls(np.zeros(dim), temperature, unparseable_prob)

    def logits(self, questions: Sequence[Question], v=None) -> np.ndarray:
        """Per-question GT-minus-CB logit, already divided by the temperature."""
        v = self.v if v is None else v
        return _diffs(questions) @ v / self.temperature

    def gt_prob(self, questions: Sequence[Question]) -> np.ndarray:
        """P(GT | parseable) for each question."""
        return expit(self.logits(questions))

    def to_dict(self, config: Optional[dict] = None) -> dict:
        return {
            "v": self.v.tolist(),
            "temperature": self.temperature,
            "unparseable_prob": self.unparseable_prob,
            "reference": self.reference.tolist(),
            "config": config or {},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Policy":
        try:
            return cls(payload["v"], payload["temperature"], payload["unparseable_prob"], payload["reference"])
        except KeyError as exc:
            raise DataError(f"policy checkpoint is missing {exc}") from None


def save_policy(policy: Policy, path, config: Optional[dict] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_policy(path) -> Policy:
    try:
        with open(path, encoding="utf-8") as fh:
            return Policy.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"policy checkpoint not found: {path}") from None


def _diffs(questions):
    return np.stack([q.gt_response.features - q.cb_response.features for q in questions])


def _draw(p_gt: np.ndarray, eps: float, size: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((p_gt.shape[0], size, 2))
    out = np.where(u[..., 1] < p_gt[:, None], Answer.GT, Answer.CB)
    return np.where(u[..., 0] < eps, Answer.UNPARSEABLE, out).astype(np.int8)


def sample_answers(policy: Policy, question: Question, G: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``G`` answers (values of :class:`Answer`) for one question."""
    if G < 1:
        raise ConfigError("need at least one sample")
    return _draw(policy.gt_prob([question]), policy.unparseable_prob, G, rng)[0]


@dataclass(frozen=True)
class GrpoConfig:
    num_generations: int = 4
    kl_coef: float = 0.04
    format_bonus: float = 2.0
    epochs: int = 2
    learning_rate: float = 0.5
    batch_size: int = 4
    eval_samples: int = 10
    temperature: float = 0.7
    unparseable_prob: float = 0.02
    seed: int = 42
    greedy_eval: bool = False

    def __post_init__(self):
        if self.num_generations < 2:
            raise ConfigError("num_generations must be at least 2")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be non-negative")
        if self.eval_samples < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("eval_samples, epochs and batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


def _answer_rewards(answers, r_gt, r_cb, bonus):
    parsed_reward = np.where(answers == Answer.GT, r_gt[:, None], r_cb[:, None]) + bonus
    return np.where(answers == Answer.UNPARSEABLE, -bonus, parsed_reward)


def shaped_reward(answer: Answer, question: Question, model: RewardModel, cfg: GrpoConfig) -> float:
    """``(r - offset) + bonus`` for a parseable answer, ``-bonus`` otherwise."""
    if model.offset is None:
        raise TrainingError("reward model offset has not been calibrated")
    if answer == Answer.UNPARSEABLE:
        return -cfg.format_bonus
    response = question.gt_response if answer == Answer.GT else question.cb_response
    return float(model.centered_score(response.features)) + cfg.format_bonus


def group_advantages(rewards) -> np.ndarray:
    """Normalize rewards within each group (last axis) to zero mean and unit population std."""
    R = np.asarray(rewards, dtype=float)
    if R.shape[-1] < 2:
        raise ConfigError("a group needs at least two rewards")
    mean = R.mean(axis=-1, keepdims=True)
    std = R.std(axis=-1, keepdims=True)
    # a constant group can still show a rounding-level std, so test the spread directly
    constant = np.ptp(R, axis=-1, keepdims=True) == 0
    return np.where(constant, 0.0, (R - mean) / (std + ADV_EPS))


def kl_to_reference(policy: Policy, questions: Sequence[Question]) -> float:
    """Mean KL(policy || reference) over the three-outcome answer distribution."""
    p = expit(policy.logits(questions))
    q = expit(policy.logits(questions, policy.reference))
    return float(np.mean((1.0 - policy.unparseable_prob) * _kl_bern(p, q)))


def _kl_bern(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
        b = np.where(p < 1, (1 - p) * (np.log1p(-p) - np.log1p(-q)), 0.0)
    return a + b


@dataclass
class PolicyTrainResult:
    policy: Policy
    reward_trace: List[float]
    kl_trace: List[float] = field(default_factory=list)


def train_policy(policy: Policy, questions: Sequence[Question], model: RewardModel,
                 cfg: GrpoConfig = GrpoConfig()) -> PolicyTrainResult:
    """Group-relative policy ascent against a frozen, offset-calibrated reward model.

    Each step samples ``num_generations`` answers per prompt, normalizes the
    shaped rewards within each prompt's group and ascends the
    advantage-weighted log-likelihood minus ``kl_coef`` times the exact KL to
    the reference policy. The step is damped by ``1 + lr * kl_coef * L`` where
    ``L`` bounds the KL curvature, which keeps very large KL weights stable.
    """
    if model.offset is None:
        raise TrainingError("reward model offset has not been calibrated")
    if not questions:
        raise DataError("cannot train a policy on zero questions")
    frozen = model.param_bytes()
    policy = dataclasses.replace(policy, v=policy.v.copy(), reference=policy.reference.copy())
    T, eps = policy.temperature, policy.unparseable_prob
    D = _diffs(questions)
    r_gt = model.centered_score(np.stack([q.gt_response.features for q in questions]))
    r_cb = model.centered_score(np.stack([q.cb_response.features for q in questions]))
    z_ref_all = D @ policy.reference / T

    sample_rng = rng_for(cfg.seed, "policy.sample")
    shuffle_rng = rng_for(cfg.seed, "policy.shuffle")
    n = len(questions)
    rewards_trace, kl_trace = [], []
    step = 0
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            d = D[idx]
            z = d @ policy.v / T
            p = expit(z)
            answers = _draw(p, eps, cfg.num_generations, sample_rng)
            R = _answer_rewards(answers, r_gt[idx], r_cb[idx], cfg.format_bonus)
            A = group_advantages(R)
            # d log pi(answer) / d z: GT -> 1 - p, CB -> -p, unparseable -> 0
            dlogp = np.where(answers == Answer.GT, (1.0 - p)[:, None],
                             np.where(answers == Answer.CB, -p[:, None], 0.0))
            pg_z = (A * dlogp).mean(axis=1)
            kl_z = (1.0 - eps) * p * (1.0 - p) * (z - z_ref_all[idx])
            grad = ((pg_z - cfg.kl_coef * kl_z) @ d) / (len(idx) * T)
            curvature = (1.0 - eps) * 0.25 * float(np.mean(np.sum(d * d, axis=1))) / T**2
            lr = cfg.learning_rate / (1.0 + cfg.learning_rate * cfg.kl_coef * curvature)
            policy.v = policy.v + lr * grad
            step += 1
            if not np.all(np.isfinite(policy.v)):
                raise TrainingError(f"policy parameters became non-finite at step {step}")
            rewards_trace.append(float(R.mean()))
            kl_trace.append(float(np.mean((1.0 - eps) * _kl_bern(p, expit(z_ref_all[idx])))))
    if model.param_bytes() != frozen:
        raise TrainingError("reward model parameters changed during policy training")
    return PolicyTrainResult(policy, rewards_trace, kl_trace)


def eval_answers(policy: Policy, questions: Sequence[Question], n: int = 10, seed: int = 42,
                 greedy: bool = False) -> np.ndarray:
    """Answer matrix (questions x n) used for evaluation."""
    if n < 1:
        raise ConfigError("need at least one evaluation sample per question")
    if not questions:
        raise DataError("cannot evaluate on zero questions")
    p = policy.gt_prob(questions)
    if greedy:
        eps = policy.unparseable_prob
        best = np.where(p >= 0.5, Answer.GT, Answer.CB)
        best = np.where(eps > (1.0 - eps) * np.maximum(p, 1.0 - p), Answer.UNPARSEABLE, best)
        return np.repeat(best[:, None], n, axis=1).astype(np.int8)
    return _draw(p, policy.unparseable_prob, n, rng_for(seed, "policy.eval"))


def evaluate_gt_rate(policy: Policy, questions: Sequence[Question], n: int = 10, seed: int = 42,
                     greedy: bool = False) -> Tuple[float, np.ndarray]:
    """Fraction of ``n`` samples per question that pick the gt answer, plus per-question rates."""
    answers = eval_answers(policy, questions, n, seed, greedy)
    per_question = (answers == Answer.GT).mean(axis=1)
    return float(per_question.mean()), per_question


def mean_shaped_reward(answers: np.ndarray, questions: Sequence[Question], model: RewardModel,
                       cfg: GrpoConfig) -> np.ndarray:
    """Per-question mean shaped reward of an answer matrix under ``model``."""
    r_gt = model.centered_score(np.stack([q.gt_response.features for q in questions]))
    r_cb = model.centered_score(np.stack([q.cb_response.features for q in questions]))
    return _answer_rewards(answers, r_gt, r_cb, cfg.format_bonus).mean(axis=1)

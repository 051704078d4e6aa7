"""Bias-score (D_f) producers, calibration and judge-quality metrics."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import requests
from scipy.special import expit, logit

from dynbeta.core import PreferencePair, Question, Response, rng_for
from dynbeta.errors import ConfigError, DataError, ProtocolError, TransportError

log = logging.getLogger(__name__)

TOKEN_ENV = "DYNBETA_JUDGE_TOKEN"
DEFAULT_PROMPT = (
    "Scenario {question_id} may invite {bias_type}. Two candidate answers follow. "
    "Which one is more likely the product of {bias_type}?"
)

Scores = Dict[str, Tuple[float, float]]  # question id -> (d_f of gt response, d_f of cb response)


class JudgeKind(str, enum.Enum):
    ORACLE = "oracle"
    NOISY = "noisy"
    EXTERNAL = "external"


@dataclass(frozen=True)
class JudgeConfig:
    kind: JudgeKind = JudgeKind.ORACLE
    high_score: float = 0.8
    low_score: float = 0.2
    # std of the Gaussian added in logit space; type_sigmas overrides it per bias type
    noise_sigma: float = 0.0
    type_sigmas: Mapping[str, float] = field(default_factory=dict)
    endpoint_url: Optional[str] = None
    prompt_template: str = DEFAULT_PROMPT
    request_timeout: float = 10.0
    max_retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4
    rng_seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "kind", JudgeKind(self.kind))
        if not (0.0 <= self.low_score < 0.5 < self.high_score <= 1.0):
            raise ConfigError("judge levels need low_score < 0.5 < high_score within [0, 1]")
        sigmas = [self.noise_sigma, *self.type_sigmas.values()]
        if any(not (s >= 0 and math.isfinite(s)) for s in sigmas):
            raise ConfigError("noise sigmas must be finite and non-negative")
        if self.max_retries < 0 or self.max_in_flight < 1 or self.request_timeout <= 0:
            raise ConfigError("invalid transport settings")

    def sigma_for(self, bias_type: str) -> float:
        return float(self.type_sigmas.get(bias_type, self.noise_sigma))


def perturb_score(base, z):
    """Shift a probability by ``z`` in logit space."""
    return expit(logit(base) + z)


def score_response_oracle(response: Response, config: JudgeConfig, rng: Optional[np.random.Generator] = None,
                          sigma: Optional[float] = None) -> float:
    """Oracle bias score for one response, optionally perturbed in logit space."""
    if config.kind is JudgeKind.EXTERNAL:
        raise ConfigError("score_response_oracle called with an external judge config")
    base = config.high_score if response.is_bias_consistent else config.low_score
    sigma = config.noise_sigma if sigma is None else sigma
    if config.kind is JudgeKind.ORACLE or sigma == 0.0:
        return base
    if rng is None:
        rng = rng_for(config.rng_seed, "judge.noise")
    return float(perturb_score(base, sigma * rng.standard_normal()))


def oracle_scores(questions: Sequence[Question], config: JudgeConfig) -> Scores:
    """Score every question's gt and cb response with the (noisy) oracle.

    One standard-normal pair per question is drawn in question order and
    scaled by the bias type's sigma, so different sigmas share the draws.
    """
    if config.kind is JudgeKind.EXTERNAL:
        raise ConfigError("oracle_scores called with an external judge config")
    z = rng_for(config.rng_seed, "judge.noise").standard_normal((len(questions), 2))
    if config.kind is JudgeKind.NOISY:
        sigma = np.array([config.sigma_for(q.bias_type) for q in questions])
    else:
        sigma = np.zeros(len(questions))
    gt = np.where(sigma == 0.0, config.low_score, perturb_score(config.low_score, sigma * z[:, 0]))
    cb = np.where(sigma == 0.0, config.high_score, perturb_score(config.high_score, sigma * z[:, 1]))
    return {q.id: (float(g), float(c)) for q, g, c in zip(questions, gt, cb)}


def render_response(response: Response) -> str:
    return "answer " + response.id + ": [" + ", ".join(f"{x:.4f}" for x in response.features) + "]"


class ExternalJudge:
    """HTTP client for a pairwise judge that replies with two choice logits."""

    def __init__(self, config: JudgeConfig, session: Optional[requests.Session] = None, sleep=time.sleep):
        if not config.endpoint_url:
            raise ConfigError("external judge needs an endpoint_url")
        self.config = config
        self.session = session or requests.Session()
        self._sleep = sleep
        token = os.environ.get(TOKEN_ENV)
        self.headers = {"Authorization": f"Bearer {token}"} if token else {}

    def request_logits(self, prompt: str, first: str, second: str) -> Tuple[float, float]:
        cfg = self.config
        payload = {"prompt": prompt, "option_first": first, "option_second": second}
        last_error = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self._sleep(cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(cfg.endpoint_url, json=payload, headers=self.headers,
                                         timeout=cfg.request_timeout)
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.warning("judge request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = f"HTTP {resp.status_code}"
                log.warning("judge endpoint returned %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"judge endpoint returned HTTP {resp.status_code}", body=resp.text)
            return self._parse(resp.text)
        raise TransportError(
            f"judge endpoint {cfg.endpoint_url} unreachable after {cfg.max_retries + 1} attempts ({last_error})"
        )

    @staticmethod
    def _parse(body: str) -> Tuple[float, float]:
        try:
            data = json.loads(body)
            first, second = float(data["logit_first"]), float(data["logit_second"])
        except (ValueError, KeyError, TypeError):
            raise ProtocolError("judge reply is not {logit_first, logit_second}", body=body) from None
        if not (math.isfinite(first) and math.isfinite(second)):
            raise ProtocolError("judge reply has non-finite logits", body=body)
        return first, second

    def score_pair(self, question: Question, a: Response, b: Response) -> Tuple[float, float]:
        prompt = self.config.prompt_template.format(question_id=question.id, bias_type=question.bias_type)
        ta, tb = render_response(a), render_response(b)
        l_first, l_second = self.request_logits(prompt, ta, tb)
        p_ab = _softmax2(l_first, l_second)  # (A, B) in A-first order
        l_first, l_second = self.request_logits(prompt, tb, ta)
        p_ba = _softmax2(l_first, l_second)  # (B, A) in B-first order
        d_a = (p_ab[0] + p_ba[1]) / 2.0
        d_b = (p_ab[1] + p_ba[0]) / 2.0
        return d_a, d_b


def _softmax2(a: float, b: float) -> Tuple[float, float]:
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    return ea / (ea + eb), eb / (ea + eb)


def score_pair_external(question: Question, responses: Tuple[Response, Response], config: JudgeConfig,
                        client: Optional[ExternalJudge] = None) -> Tuple[float, float]:
    """Judge both orderings of (A, B) and average each response's softmax probability."""
    if config.kind is not JudgeKind.EXTERNAL:
        raise ConfigError("score_pair_external needs an external judge config")
    client = client or ExternalJudge(config)
    return client.score_pair(question, *responses)


def external_scores(questions: Sequence[Question], config: JudgeConfig,
                    client: Optional[ExternalJudge] = None) -> Scores:
    client = client or ExternalJudge(config)

    def one(q):
        return client.score_pair(q, q.gt_response, q.cb_response)

    pool = ThreadPoolExecutor(max_workers=config.max_in_flight)
    try:
        results = list(pool.map(one, questions))
    except BaseException:
        # stop queued requests instead of hammering a failing endpoint
        pool.shutdown(wait=True, cancel_futures=True)
        raise
    pool.shutdown(wait=True)
    return {q.id: (float(gt), float(cb)) for q, (gt, cb) in zip(questions, results)}


def score_questions(questions: Sequence[Question], config: JudgeConfig,
                    client: Optional[ExternalJudge] = None) -> Scores:
    if config.kind is JudgeKind.EXTERNAL:
        return external_scores(questions, config, client)
    return oracle_scores(questions, config)


def attach_scores(pairs: Sequence[PreferencePair], scores: Mapping[str, Tuple[float, float]]):
    """Copy each pair's chosen/rejected bias scores out of the per-question table."""
    out = []
    for p in pairs:
        try:
            gt, cb = scores[p.question_id]
        except KeyError:
            raise DataError(f"no judge scores for question {p.question_id}") from None
        out.append(p.with_scores(cb, gt) if p.chosen.is_bias_consistent else p.with_scores(gt, cb))
    return out


def _score_rows(scores) -> np.ndarray:
    rows = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    if not rows:
        raise DataError("judge accuracy over zero questions")
    if any(r is None or r[0] is None or r[1] is None for r in rows):
        raise DataError("judge accuracy needs both gt and cb scores on every question")
    return np.asarray(rows, dtype=float)


def pairwise_judge_accuracy(scores) -> float:
    """Fraction of questions where the cb response scores above the gt one (ties count 0.5).

    ``scores`` is a mapping of question id to ``(gt, cb)`` or an iterable of such tuples.
    """
    arr = _score_rows(scores)
    gt, cb = arr[:, 0], arr[:, 1]
    return float(np.mean(np.where(cb > gt, 1.0, np.where(cb == gt, 0.5, 0.0))))


IDENTITY = "identity"
INVERT = "invert"


def calibrate(questions: Sequence[Question], scores: Mapping[str, Tuple[float, float]],
              min_per_type: int = 20) -> Dict[str, str]:
    """Per-bias-type direction fix: invert a type whose held-out accuracy is below 0.5."""
    by_type: Dict[str, list] = {}
    for q in questions:
        by_type.setdefault(q.bias_type, []).append(scores[q.id])
    cmap = {}
    for bias_type in sorted(by_type):
        rows = by_type[bias_type]
        if len(rows) < min_per_type:
            raise DataError(f"bias type {bias_type!r} has {len(rows)} held-out questions; need {min_per_type}")
        cmap[bias_type] = INVERT if pairwise_judge_accuracy(rows) < 0.5 else IDENTITY
    return cmap


def apply_calibration(questions: Sequence[Question], scores: Mapping[str, Tuple[float, float]],
                      cmap: Mapping[str, str]) -> Scores:
    out = {}
    for q in questions:
        action = cmap.get(q.bias_type)
        if action is None:
            raise DataError(f"calibration map does not cover bias type {q.bias_type!r}")
        gt, cb = scores[q.id]
        out[q.id] = (1.0 - gt, 1.0 - cb) if action == INVERT else (gt, cb)
    return out


def save_calibration(cmap: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(cmap.items())), fh, indent=2)
        fh.write("\n")


def load_calibration(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        cmap = json.load(fh)
    bad = {k: v for k, v in cmap.items() if v not in (IDENTITY, INVERT)}
    if bad:
        raise DataError(f"calibration file {path} has unknown actions {bad}")
    return cmap


def per_type_accuracy(questions: Sequence[Question], scores: Mapping[str, Tuple[float, float]]) -> Dict[str, float]:
    by_type: Dict[str, list] = {}
    for q in questions:
        by_type.setdefault(q.bias_type, []).append(scores[q.id])
    return {t: pairwise_judge_accuracy(rows) for t, rows in sorted(by_type.items())}

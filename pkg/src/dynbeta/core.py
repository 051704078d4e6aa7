"""Domain types and the per-annotation rationality (beta) assignment."""

from __future__ import annotations

import dataclasses
import enum
import math
import zlib
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from dynbeta.errors import ConfigError, DataError, InputDomainError

# Baseline arms that use a fixed beta.
BASELINE_FIXED_BETAS = (0.1, 0.5, 0.9, 1.0)

ArrayLike = Union[float, np.ndarray, Sequence[float]]


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Generator for one named purpose; equal seeds give unrelated streams across purposes."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode())])


class Provenance(str, enum.Enum):
    GT_CHOSEN = "gt"
    CB_CHOSEN = "cb"


@dataclass(frozen=True)
class Response:
    id: str
    features: np.ndarray
    bias_salience: float
    is_bias_consistent: bool

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 1:
            raise DataError(f"response {self.id}: features must be a 1-D vector")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"response {self.id}: features contain NaN or Inf")
        if not 0.0 <= self.bias_salience <= 1.0:
            raise DataError(f"response {self.id}: bias_salience {self.bias_salience} outside [0, 1]")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    def __eq__(self, other):
        if not isinstance(other, Response):
            return NotImplemented
        return (
            self.id == other.id
            and self.bias_salience == other.bias_salience
            and self.is_bias_consistent == other.is_bias_consistent
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True, eq=True)
class Question:
    id: str
    bias_type: str
    gt_response: Response
    cb_response: Response
    scenario_bias_score: Optional[float] = None

    def __post_init__(self):
        if self.gt_response.is_bias_consistent or not self.cb_response.is_bias_consistent:
            raise DataError(f"question {self.id}: exactly the cb response must be bias-consistent")
        if self.gt_response.features.shape != self.cb_response.features.shape:
            raise DataError(f"question {self.id}: gt and cb feature dimensions differ")
        d_s = self.scenario_bias_score
        if d_s is not None and not 0.0 <= d_s <= 1.0:
            raise DataError(f"question {self.id}: scenario_bias_score {d_s} outside [0, 1]")

    @property
    def dim(self) -> int:
        return self.gt_response.features.shape[0]


@dataclass(frozen=True)
class PreferencePair:
    question_id: str
    chosen: Response
    rejected: Response
    provenance: Provenance
    d_f_chosen: Optional[float] = None
    d_f_rejected: Optional[float] = None
    beta: Optional[float] = None

    def __post_init__(self):
        if self.chosen.id == self.rejected.id:
            raise DataError(f"pair on {self.question_id}: chosen and rejected are the same response")
        expected = Provenance.CB_CHOSEN if self.chosen.is_bias_consistent else Provenance.GT_CHOSEN
        if Provenance(self.provenance) is not expected:
            raise DataError(f"pair on {self.question_id}: provenance disagrees with chosen response")
        object.__setattr__(self, "provenance", expected)
        for name in ("d_f_chosen", "d_f_rejected", "beta"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise DataError(f"pair on {self.question_id}: {name}={value} outside [0, 1]")

    def with_scores(self, d_f_chosen: float, d_f_rejected: float) -> "PreferencePair":
        return dataclasses.replace(self, d_f_chosen=float(d_f_chosen), d_f_rejected=float(d_f_rejected))


class BetaMode(str, enum.Enum):
    FIXED = "fixed"
    RANDOM = "random"
    DYNAMIC = "dynamic"
    SCENARIO = "scenario"


@dataclass(frozen=True)
class BetaConfig:
    """How rationality weights get assigned to preference pairs.

    ``theta`` may be the string ``"auto"``; call :meth:`resolve` with the
    training response scores before assigning.
    """

    mode: BetaMode = BetaMode.DYNAMIC
    k: float = 30.0
    theta: Union[float, str] = 0.40
    fixed_value: float = 1.0
    per_question: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", BetaMode(self.mode))
        if not (math.isfinite(self.k) and self.k > 0):
            raise ConfigError(f"k must be positive, got {self.k}")
        if self.theta != "auto":
            if isinstance(self.theta, str) or not 0.0 <= float(self.theta) <= 1.0:
                raise ConfigError(f"theta must be in [0, 1] or 'auto', got {self.theta!r}")
        if not 0.0 <= self.fixed_value <= 1.0:
            raise ConfigError(f"fixed_value must be in [0, 1], got {self.fixed_value}")

    @property
    def is_auto(self) -> bool:
        return self.theta == "auto"

    def resolve(self, response_scores: Sequence[float]) -> "BetaConfig":
        if not self.is_auto:
            return self
        return dataclasses.replace(self, theta=resolve_auto_threshold(response_scores))


def _check_unit(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise InputDomainError(f"{name} must lie in [0, 1], got {value!r}")
    return arr


def _check_k(k):
    if not (np.isfinite(k) and k > 0):
        raise ConfigError(f"k must be a positive finite number, got {k!r}")


def _scalar_or_array(arr):
    return float(arr) if arr.ndim == 0 else arr


def _logistic(x):
    # 1 - expit(-x) rounds correctly near 1, where 1 / (1 + exp(-x)) collapses to 1.0 early
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, 1.0 - expit(-x), expit(x))


def beta_dynamic(d_f: ArrayLike, k: float, theta: float) -> ArrayLike:
    """Rationality weight ``logistic(k * (theta - d_f))``.

    Accepts a scalar or an array of bias scores. Low bias scores push the
    weight toward 1 and high ones toward 0; the weight is exactly 0.5 when
    ``d_f == theta``. No clamping is applied.
    """
    d_f = _check_unit("d_f", d_f)
    theta = float(_check_unit("theta", theta))
    _check_k(k)
    return _scalar_or_array(_logistic(k * (theta - d_f)))


def beta_scenario_variant(d_s: ArrayLike, d_f: ArrayLike, k: float, c: float) -> ArrayLike:
    """Weight ``logistic(k * d_s * (c - d_f))`` that also scales by scenario bias."""
    d_s = _check_unit("d_s", d_s)
    d_f = _check_unit("d_f", d_f)
    c = float(_check_unit("c", c))
    _check_k(k)
    return _scalar_or_array(_logistic(k * d_s * (c - d_f)))


def resolve_auto_threshold(d_f_values: Sequence[float]) -> float:
    """Median of the pooled bias scores; even counts average the middle two."""
    values = np.asarray(list(d_f_values), dtype=float)
    if values.size == 0:
        raise DataError("cannot resolve an automatic threshold from zero scores")
    _check_unit("d_f_values", values)
    return float(np.median(values))


def assign_betas(
    pairs: Sequence[PreferencePair],
    config: BetaConfig,
    rng_seed: int = 0,
    scenario_scores: Optional[Mapping[str, float]] = None,
) -> list:
    """Return copies of ``pairs`` with ``beta`` set according to ``config``.

    Random mode draws one Uniform(0, 1) value per pair (or per question when
    ``config.per_question`` is set) from a stream seeded by ``rng_seed``.
    Scenario mode needs ``scenario_scores`` keyed by question id.
    """
    pairs = list(pairs)
    mode = config.mode
    if mode is BetaMode.FIXED:
        betas = np.full(len(pairs), float(config.fixed_value))
    elif mode is BetaMode.RANDOM:
        rng = rng_for(rng_seed, "beta.random")
        if config.per_question:
            drawn = {}
            betas = np.empty(len(pairs))
            for i, pair in enumerate(pairs):
                if pair.question_id not in drawn:
                    drawn[pair.question_id] = rng.random()
                betas[i] = drawn[pair.question_id]
        else:
            betas = rng.random(len(pairs))
    else:
        if config.is_auto:
            raise ConfigError("theta is 'auto'; resolve it against training scores first")
        d_f = np.empty(len(pairs))
        for i, pair in enumerate(pairs):
            if pair.d_f_chosen is None:
                raise DataError(f"pair {i} (question {pair.question_id}) has no d_f_chosen score")
            d_f[i] = pair.d_f_chosen
        if mode is BetaMode.DYNAMIC:
            betas = np.atleast_1d(beta_dynamic(d_f, config.k, config.theta))
        else:
            if scenario_scores is None:
                raise DataError("scenario mode needs scenario bias scores")
            d_s = np.empty(len(pairs))
            for i, pair in enumerate(pairs):
                value = scenario_scores.get(pair.question_id)
                if value is None:
                    raise DataError(f"question {pair.question_id} has no scenario_bias_score")
                d_s[i] = value
            betas = np.atleast_1d(beta_scenario_variant(d_s, d_f, config.k, config.theta))
    return [dataclasses.replace(p, beta=float(b)) for p, b in zip(pairs, betas)]

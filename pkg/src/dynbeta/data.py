"""Synthetic biased-annotator datasets, pair corruption, splits and CSV I/O."""

from __future__ import annotations

import csv
import enum
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dynbeta.core import PreferencePair, Provenance, Question, Response, rng_for
from dynbeta.errors import ConfigError, DataError


@dataclass(frozen=True)
class SynthConfig:
    num_questions: int = 500
    feature_dim: int = 16
    margin: float = 1.0
    bias_salience_range: Tuple[float, float] = (0.3, 1.0)
    num_bias_types: int = 4
    rng_seed: int = 42
    # length of the salience offset at bias_salience == 1
    salience_scale: float = 1.5
    # std of the reward-neutral per-question perturbation of cb features
    noise_scale: float = 0.5

    def __post_init__(self):
        lo, hi = self.bias_salience_range
        if self.num_questions < 1:
            raise ConfigError("num_questions must be positive")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be at least 2")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"bias_salience_range {self.bias_salience_range} is not a sub-interval of [0, 1]")
        if self.num_bias_types < 1:
            raise ConfigError("num_bias_types must be at least 1")
        if self.salience_scale < 0 or self.noise_scale < 0:
            raise ConfigError("salience_scale and noise_scale must be non-negative")


@dataclass(frozen=True)
class TrueReward:
    """Hidden linear reward ``r*(x) = w . x`` with unit-norm ``w``."""

    weights: np.ndarray

    def __call__(self, features):
        return np.asarray(features, dtype=float) @ self.weights


def _orthonormal_salience_dirs(rng, w, count):
    d = w.shape[0]
    dirs = []
    for _ in range(count):
        v = rng.standard_normal(d)
        v -= (v @ w) * w
        # keep per-type directions mutually orthogonal while there is room
        if len(dirs) < d - 1:
            for u in dirs:
                v -= (v @ u) * u
        v /= np.linalg.norm(v)
        dirs.append(v)
    return dirs


def bias_type_name(index: int) -> str:
    return f"bias_{index:02d}"


def generate_questions(config: SynthConfig) -> Tuple[List[Question], TrueReward]:
    """Draw synthetic questions whose cb response trails the gt one by exactly ``margin``.

    cb features are the gt features moved ``-margin`` along the hidden reward
    direction, plus a salience offset along a per-bias-type direction and
    Gaussian noise, both orthogonal to the reward direction.
    """
    rng = rng_for(config.rng_seed, "data.generate")
    d = config.feature_dim
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    sal_dirs = _orthonormal_salience_dirs(rng, w, config.num_bias_types)
    lo, hi = config.bias_salience_range

    n = config.num_questions
    gt = rng.standard_normal((n, d))
    salience = rng.uniform(lo, hi, size=n)
    noise = rng.standard_normal((n, d)) * config.noise_scale
    noise -= np.outer(noise @ w, w)

    questions = []
    for i in range(n):
        t = i % config.num_bias_types
        cb = gt[i] - config.margin * w + config.salience_scale * salience[i] * sal_dirs[t] + noise[i]
        qid = f"q{i:05d}"
        questions.append(
            Question(
                id=qid,
                bias_type=bias_type_name(t),
                gt_response=Response(f"{qid}-gt", gt[i].copy(), 0.0, False),
                cb_response=Response(f"{qid}-cb", cb, float(salience[i]), True),
                scenario_bias_score=float(salience[i]),
            )
        )
    return questions, TrueReward(w)


class RatioMode(str, enum.Enum):
    FIXED = "fixed"
    RANDOM = "random"


@dataclass(frozen=True)
class PairRatioConfig:
    """Pairs emitted per question: ``gt_pairs`` gt-chosen and ``cb_pairs`` cb-chosen.

    In random mode the cb count is drawn per question, uniformly from
    ``0..max_cb``; ``gt_pairs`` still applies.
    """

    mode: RatioMode = RatioMode.FIXED
    gt_pairs: int = 1
    cb_pairs: int = 3
    max_cb: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mode", RatioMode(self.mode))
        if self.gt_pairs < 0 or self.cb_pairs < 0 or self.max_cb < 0:
            raise ConfigError("pair counts must be non-negative")
        if self.mode is RatioMode.FIXED and self.gt_pairs + self.cb_pairs < 1:
            raise ConfigError("a fixed ratio needs at least one pair per question")
        if self.mode is RatioMode.RANDOM and self.gt_pairs + self.max_cb < 1:
            raise ConfigError("a random ratio needs gt_pairs + max_cb >= 1")

    @property
    def label(self) -> str:
        if self.mode is RatioMode.RANDOM:
            return f"random:{self.max_cb}"
        return f"{self.gt_pairs}:{self.cb_pairs}"


def corrupt_to_pairs(questions: Sequence[Question], ratio: PairRatioConfig, seed: int = 42) -> List[PreferencePair]:
    if not questions:
        raise DataError("cannot build pairs from an empty question set")
    rng = rng_for(seed, "data.pairs")
    pairs = []
    for q in questions:
        if ratio.mode is RatioMode.RANDOM:
            n_cb = int(rng.integers(0, ratio.max_cb + 1))
        else:
            n_cb = ratio.cb_pairs
        for _ in range(ratio.gt_pairs):
            pairs.append(PreferencePair(q.id, q.gt_response, q.cb_response, Provenance.GT_CHOSEN))
        for _ in range(n_cb):
            pairs.append(PreferencePair(q.id, q.cb_response, q.gt_response, Provenance.CB_CHOSEN))
    return pairs


@dataclass(frozen=True)
class SplitConfig:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    stratify_key: str = "bias_type"
    seed: int = 42

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ConfigError(f"split fractions must each lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


def _apportion(n, fracs):
    """Largest-remainder split of ``n`` items; each count is within 1 of its target."""
    targets = [n * f for f in fracs]
    counts = [math.floor(t) for t in targets]
    leftover = n - sum(counts)
    order = sorted(range(len(fracs)), key=lambda i: (-(targets[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split_stratified(questions: Sequence[Question], config: SplitConfig = SplitConfig()):
    """Partition questions into (train, val, test), stratified on ``config.stratify_key``."""
    strata: Dict[str, List[int]] = defaultdict(list)
    for i, q in enumerate(questions):
        strata[str(getattr(q, config.stratify_key))].append(i)
    for key, members in strata.items():
        if len(members) < 3:
            raise DataError(f"stratum {key!r} has {len(members)} questions; at least 3 are needed to split")

    rng = rng_for(config.seed, "data.split")
    fracs = (config.train_frac, config.val_frac, config.test_frac)
    parts: Tuple[List[int], List[int], List[int]] = ([], [], [])
    for key in sorted(strata):
        members = np.asarray(strata[key])
        shuffled = members[rng.permutation(len(members))]
        n_train, n_val, _ = _apportion(len(members), fracs)
        parts[0].extend(shuffled[:n_train].tolist())
        parts[1].extend(shuffled[n_train : n_train + n_val].tolist())
        parts[2].extend(shuffled[n_train + n_val :].tolist())
    return tuple([questions[i] for i in sorted(idx)] for idx in parts)


# -- CSV ------------------------------------------------------------------

QUESTION_COLUMNS = ["question_id", "bias_type", "gt_features", "cb_features", "bias_salience", "scenario_bias_score"]
QUESTION_REQUIRED = QUESTION_COLUMNS[:5]
PAIR_COLUMNS = ["question_id", "provenance", "d_f_chosen", "d_f_rejected", "beta"]
PAIR_REQUIRED = PAIR_COLUMNS[:2]
SCORE_COLUMNS = ["question_id", "bias_type", "d_f_gt", "d_f_cb"]


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def _fmt_vec(v: np.ndarray) -> str:
    return ";".join(repr(float(x)) for x in v)


class _RowReader:
    def __init__(self, path, required):
        self.path = os.fspath(path)
        self.required = required

    def __iter__(self):
        if not os.path.exists(self.path):
            raise DataError(f"file not found: {self.path}")
        with open(self.path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in self.required if c not in header]
            if missing:
                raise DataError(f"{self.path}: missing required column(s) {', '.join(missing)}")
            for rownum, row in enumerate(reader, start=1):
                yield rownum, row

    def real(self, rownum, row, column, optional=False, unit=False):
        raw = (row.get(column) or "").strip()
        if raw == "":
            if optional:
                return None
            raise DataError(f"{self.path}: row {rownum}: column {column} is empty")
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"{self.path}: row {rownum}: column {column} is not numeric ({raw!r})") from None
        if not math.isfinite(value):
            raise DataError(f"{self.path}: row {rownum}: column {column} is not finite")
        if unit and not 0.0 <= value <= 1.0:
            raise DataError(f"{self.path}: row {rownum}: column {column}={value} outside [0, 1]")
        return value

    def vector(self, rownum, row, column):
        raw = (row.get(column) or "").strip()
        try:
            values = np.array([float(x) for x in raw.split(";")])
        except ValueError:
            raise DataError(f"{self.path}: row {rownum}: column {column} is not a ';'-joined vector") from None
        if not np.all(np.isfinite(values)):
            raise DataError(f"{self.path}: row {rownum}: column {column} has non-finite entries")
        return values


def write_questions_csv(questions: Iterable[Question], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(QUESTION_COLUMNS)
        for q in questions:
            writer.writerow([
                q.id,
                q.bias_type,
                _fmt_vec(q.gt_response.features),
                _fmt_vec(q.cb_response.features),
                _fmt(q.cb_response.bias_salience),
                _fmt(q.scenario_bias_score),
            ])


def load_questions_csv(path) -> List[Question]:
    """Load a questions file. The gt response is taken to have zero salience."""
    reader = _RowReader(path, QUESTION_REQUIRED)
    questions = []
    dim = None
    for rownum, row in reader:
        qid = (row["question_id"] or "").strip()
        if not qid:
            raise DataError(f"{reader.path}: row {rownum}: column question_id is empty")
        gt = reader.vector(rownum, row, "gt_features")
        cb = reader.vector(rownum, row, "cb_features")
        if gt.shape != cb.shape or (dim is not None and gt.shape[0] != dim):
            raise DataError(f"{reader.path}: row {rownum}: feature dimension mismatch")
        dim = gt.shape[0]
        salience = reader.real(rownum, row, "bias_salience", unit=True)
        d_s = reader.real(rownum, row, "scenario_bias_score", optional=True, unit=True)
        questions.append(
            Question(
                id=qid,
                bias_type=row["bias_type"],
                gt_response=Response(f"{qid}-gt", gt, 0.0, False),
                cb_response=Response(f"{qid}-cb", cb, salience, True),
                scenario_bias_score=d_s,
            )
        )
    return questions


def write_pairs_csv(pairs: Iterable[PreferencePair], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_COLUMNS)
        for p in pairs:
            writer.writerow([p.question_id, p.provenance.value, _fmt(p.d_f_chosen), _fmt(p.d_f_rejected), _fmt(p.beta)])


def load_pairs_csv(path, questions: Sequence[Question]) -> List[PreferencePair]:
    """Load a pairs file; responses are resolved against ``questions`` by id."""
    by_id = {q.id: q for q in questions}
    reader = _RowReader(path, PAIR_REQUIRED)
    pairs = []
    for rownum, row in reader:
        qid = (row["question_id"] or "").strip()
        q = by_id.get(qid)
        if q is None:
            raise DataError(f"{reader.path}: row {rownum}: unknown question_id {qid!r}")
        prov = (row["provenance"] or "").strip()
        if prov == Provenance.GT_CHOSEN.value:
            chosen, rejected = q.gt_response, q.cb_response
        elif prov == Provenance.CB_CHOSEN.value:
            chosen, rejected = q.cb_response, q.gt_response
        else:
            raise DataError(f"{reader.path}: row {rownum}: column provenance must be 'gt' or 'cb', got {prov!r}")
        pairs.append(
            PreferencePair(
                qid,
                chosen,
                rejected,
                Provenance(prov),
                d_f_chosen=reader.real(rownum, row, "d_f_chosen", optional=True, unit=True),
                d_f_rejected=reader.real(rownum, row, "d_f_rejected", optional=True, unit=True),
                beta=reader.real(rownum, row, "beta", optional=True, unit=True),
            )
        )
    return pairs


def write_csv(items: Sequence, path) -> None:
    """Write questions or pairs, picking the schema from the item type."""
    items = list(items)
    if items and isinstance(items[0], PreferencePair):
        write_pairs_csv(items, path)
    else:
        write_questions_csv(items, path)


def write_scores_csv(questions: Sequence[Question], scores: Mapping[str, Tuple[float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for q in questions:
            gt, cb = scores[q.id]
            writer.writerow([q.id, q.bias_type, _fmt(gt), _fmt(cb)])


def load_scores_csv(path) -> Dict[str, Tuple[float, float]]:
    reader = _RowReader(path, ["question_id", "d_f_gt", "d_f_cb"])
    scores = {}
    for rownum, row in reader:
        scores[row["question_id"].strip()] = (
            reader.real(rownum, row, "d_f_gt", unit=True),
            reader.real(rownum, row, "d_f_cb", unit=True),
        )
    return scores

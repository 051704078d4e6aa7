"""Paired statistics, the benefit/damage ratio and the (k, theta) sweep.

Undefined quantities come back as floats rather than exceptions: an empty or
non-positive damage term gives ``math.inf`` and a zero-variance effect size or
correlation gives ``math.nan``. Report writers render both distinctly.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from dynbeta.core import BetaConfig, BetaMode, PreferencePair, Provenance, Question, assign_betas, beta_dynamic, rng_for
from dynbeta.errors import ConfigError, DataError
from dynbeta.reward import RmTrainConfig, rm_pairwise_accuracy, train_reward_model

EXACT_WILCOXON_MAX_N = 12


@dataclass(frozen=True)
class PairedSample:
    """Per-question metric values for two arms, aligned by question id."""

    ids: Tuple[str, ...]
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.shape != b.shape or a.ndim != 1 or len(self.ids) != a.shape[0]:
            raise DataError("paired sample arms must be equal-length vectors aligned with ids")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "ids", tuple(self.ids))

    @classmethod
    def from_diffs(cls, diffs) -> "PairedSample":
        d = np.asarray(diffs, dtype=float)
        return cls(tuple(str(i) for i in range(d.shape[0])), d, np.zeros_like(d))

    @classmethod
    def align(cls, a: Mapping[str, float], b: Mapping[str, float]) -> "PairedSample":
        if set(a) != set(b):
            raise DataError("paired arms cover different question ids")
        ids = tuple(sorted(a))
        return cls(ids, np.array([a[i] for i in ids]), np.array([b[i] for i in ids]))

    @property
    def diffs(self) -> np.ndarray:
        return self.a - self.b

    def __len__(self):
        return self.a.shape[0]


def _as_diffs(paired) -> np.ndarray:
    if isinstance(paired, PairedSample):
        return paired.diffs
    return np.asarray(paired, dtype=float)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.shape[0])
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def benefit_damage_from_betas(beta_gt, beta_cb, correct) -> float:
    """Mean beta advantage on judge-correct questions over the mean on judge-flipped ones."""
    beta_gt = np.asarray(beta_gt, dtype=float)
    beta_cb = np.asarray(beta_cb, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    if not correct.any():
        raise DataError("benefit/damage ratio is undefined without judge-correct questions")
    benefit = float(np.mean(beta_gt[correct] - beta_cb[correct]))
    flipped = ~correct
    if not flipped.any():
        return math.inf
    damage = float(np.mean(beta_cb[flipped] - beta_gt[flipped]))
    if damage <= 0:
        return math.inf
    return benefit / damage


def benefit_damage_ratio(pairs: Sequence[PreferencePair], correct: Mapping[str, bool]) -> float:
    """Benefit/damage ratio from beta-weighted pairs.

    Each question contributes the beta of its gt-chosen pairs and of its
    cb-chosen pairs; questions missing either kind, or missing from
    ``correct`` (e.g. judge ties), are skipped.
    """
    b_gt: Dict[str, float] = {}
    b_cb: Dict[str, float] = {}
    for p in pairs:
        if p.beta is None:
            raise DataError(f"pair on {p.question_id} has no beta")
        (b_gt if p.provenance is Provenance.GT_CHOSEN else b_cb)[p.question_id] = p.beta
    ids = [q for q in b_gt if q in b_cb and q in correct]
    return benefit_damage_from_betas(
        [b_gt[q] for q in ids], [b_cb[q] for q in ids], [bool(correct[q]) for q in ids]
    )


def judge_correctness(scores: Mapping[str, Tuple[float, float]]) -> Dict[str, bool]:
    """True where the cb response scores above the gt one; exact ties are left out."""
    return {qid: cb > gt for qid, (gt, cb) in scores.items() if cb != gt}


def bootstrap_indices(n: int, iterations: int, seed: int) -> np.ndarray:
    return rng_for(seed, "analysis.bootstrap").integers(0, n, size=(iterations, n))


def bootstrap_ci(paired, iterations: int = 10_000, level: float = 0.95, seed: int = 42) -> Tuple[float, float]:
    """Percentile bootstrap interval for the mean paired difference.

    Endpoints are order statistics of the resampled means (no interpolation).
    """
    d = _as_diffs(paired)
    if d.shape[0] < 2:
        raise DataError("bootstrap needs at least two paired observations")
    if not 0 < level < 1:
        raise ConfigError("confidence level must lie in (0, 1)")
    means = d[bootstrap_indices(d.shape[0], iterations, seed)].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha], method="inverted_cdf")
    return float(lo), float(hi)


def wilcoxon_one_sided(paired) -> float:
    """One-sided signed-rank p-value for H1: median difference > 0.

    Zero differences are dropped and tied magnitudes get average ranks. Up
    to 12 non-zero differences the null distribution is enumerated exactly;
    beyond that a normal approximation with tie and continuity corrections
    is used. All-zero input gives 1.0.
    """
    d = _as_diffs(paired)
    d = d[d != 0]
    n = d.shape[0]
    if n == 0:
        return 1.0
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        # doubled ranks are integers, so the comparison below is exact
        r2 = np.rint(2 * ranks).astype(np.int64)
        signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
        null = signs @ r2
        return float(np.mean(null >= int(round(2 * w_plus))))
    _, counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(stats.norm.sf(z))


def cohens_d_paired(paired) -> float:
    d = _as_diffs(paired)
    if d.shape[0] < 2:
        raise DataError("Cohen's d needs at least two paired observations")
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        return math.nan
    return float(np.mean(d)) / sd


def spearman_rho(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 3:
        raise DataError("Spearman correlation needs two equal-length vectors of length >= 3")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        return math.nan
    return float(rx @ ry) / denom


def spearman_pvalue(rho: float, n: int) -> float:
    """One-sided (rho > 0) p-value from the t approximation with n - 2 dof."""
    if math.isnan(rho):
        return math.nan
    if rho >= 1.0:
        return 0.0
    if rho <= -1.0:
        return 1.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(stats.t.sf(t, n - 2))


def paired_summary(paired: PairedSample, iterations: int = 10_000, seed: int = 42) -> dict:
    diffs = paired.diffs
    lo, hi = bootstrap_ci(paired, iterations, seed=seed)
    return {
        "n": len(paired),
        "delta": float(diffs.mean()),
        "ci_lo": lo,
        "ci_hi": hi,
        "wilcoxon_p": wilcoxon_one_sided(paired),
        "cohens_d": cohens_d_paired(paired),
    }


# -- (k, theta) sweep ------------------------------------------------------

class SweepObjective(str, enum.Enum):
    RM_VAL_ACCURACY = "rm_val_accuracy"
    BETA_SEPARATION = "beta_separation"


@dataclass(frozen=True)
class SweepGrid:
    k_values: Tuple[float, ...] = (10.0, 30.0, 100.0)
    theta_values: Tuple[float, ...] = (0.3, 0.4, 0.5)
    objective: SweepObjective = SweepObjective.RM_VAL_ACCURACY

    def __post_init__(self):
        object.__setattr__(self, "objective", SweepObjective(self.objective))
        object.__setattr__(self, "k_values", tuple(float(k) for k in self.k_values))
        object.__setattr__(self, "theta_values", tuple(float(t) for t in self.theta_values))
        if not self.k_values or not self.theta_values:
            raise ConfigError("sweep grid axes must be non-empty")
        if any(k <= 0 for k in self.k_values) or any(not 0 <= t <= 1 for t in self.theta_values):
            raise ConfigError("sweep grid needs k > 0 and theta in [0, 1]")

    def cells(self) -> List[Tuple[float, float]]:
        return sorted(itertools.product(set(self.k_values), set(self.theta_values)))


@dataclass
class SweepResult:
    k: float
    theta: float
    table: List[dict] = field(default_factory=list)


def beta_separation(scores: Mapping[str, Tuple[float, float]], k: float, theta: float) -> float:
    """Mean beta of gt-chosen pairs minus mean beta of cb-chosen pairs."""
    arr = np.asarray(list(scores.values()), dtype=float)
    return float(np.mean(beta_dynamic(arr[:, 0], k, theta)) - np.mean(beta_dynamic(arr[:, 1], k, theta)))


def sweep_k_theta(
    train_pairs: Sequence[PreferencePair],
    val_questions: Sequence[Question],
    grid: SweepGrid = SweepGrid(),
    rm_config: RmTrainConfig = RmTrainConfig(),
    val_scores: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> SweepResult:
    """Pick (k, theta) by scanning the grid; ties go to the smaller k, then the smaller theta."""
    best = None
    table = []
    for k, theta in grid.cells():
        if grid.objective is SweepObjective.RM_VAL_ACCURACY:
            pairs = assign_betas(train_pairs, BetaConfig(BetaMode.DYNAMIC, k=k, theta=theta))
            model = train_reward_model(pairs, rm_config).model
            value = rm_pairwise_accuracy(model, val_questions)
        else:
            if val_scores is None:
                raise DataError("the beta-separation objective needs validation judge scores")
            value = beta_separation({q.id: val_scores[q.id] for q in val_questions}, k, theta)
        table.append({"k": k, "theta": theta, "objective": grid.objective.value, "value": value})
        if best is None or value > best[2]:
            best = (k, theta, value)
    return SweepResult(best[0], best[1], table)

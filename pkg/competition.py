#!/usr/bin/env python3
"""
Competition between each feature and its knockoffs, and the resulting
FDR-controlled selection.

Ranks of the original scores are turned into labels (original win, decoy
win, ignored) and selected scores W; features are sorted by W and the
longest prefix whose estimated FDR is below the threshold is reported.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import List, NamedTuple, Optional

import numpy as np

from errors import ParameterError
from lasso import ScoreTable

logger = logging.getLogger(__name__)

ALPHA_DENOMINATOR_LIMIT = 10 ** 6


@dataclass(frozen=True)
class TuningParams:
    """Original-win threshold c = i_c/d1 and decoy-win threshold lam = i_lambda/d1"""
    d1: int
    i_c: int
    i_lambda: int

    def __post_init__(self):
        if self.d1 < 2:
            raise ParameterError(f"d1 must be >= 2, got {self.d1}")
        if not 1 <= self.i_c <= self.i_lambda <= self.d1 - 1:
            raise ParameterError(f"need 1 <= i_c <= i_lambda <= {self.d1 - 1}, "
                                 f"got i_c={self.i_c}, i_lambda={self.i_lambda}")

    @property
    def d(self) -> int:
        return self.d1 - 1

    @property
    def c(self) -> float:
        return self.i_c / self.d1

    @property
    def lam(self) -> float:
        return self.i_lambda / self.d1

    @property
    def decoy_ranks(self) -> int:
        """Number of ranks counted as decoy wins, d1 - i_lambda"""
        return self.d1 - self.i_lambda

    @classmethod
    def mirror(cls, d: int) -> 'TuningParams':
        """c = lam = floor((d+1)/2)/(d+1); for d=2 this is 1/3, the same as max_method"""
        half = (d + 1) // 2
        return cls(d + 1, half, half)

    @classmethod
    def max_method(cls, d: int) -> 'TuningParams':
        return cls(d + 1, 1, 1)

    @classmethod
    def fixed(cls, d: int, c, lam) -> 'TuningParams':
        """Parameters from c and lam given as fractions of d+1"""
        d1 = d + 1
        i_c, i_lambda = Fraction(c) * d1, Fraction(lam) * d1
        if i_c.denominator != 1 or i_lambda.denominator != 1:
            raise ParameterError(f"c={c} and lambda={lam} must be multiples of 1/{d1}")
        return cls(d1, int(i_c), int(i_lambda))

    def as_dict(self) -> dict:
        return {'d': self.d, 'i_c': self.i_c, 'i_lambda': self.i_lambda,
                'c': self.c, 'lambda': self.lam}


def parse_fixed(text: str, d: int) -> TuningParams:
    """Parse 'c,lam' (e.g. '1/4,1/2' or '0.25,0.5') into parameters for d"""
    parts = [part.strip() for part in text.split(',')]
    if len(parts) != 2:
        raise ParameterError(f"fixed method needs 'c,lambda', got '{text}'")
    try:
        c, lam = (Fraction(part).limit_denominator(ALPHA_DENOMINATOR_LIMIT) for part in parts)
    except ValueError:
        raise ParameterError(f"cannot parse fixed parameters '{text}'")
    return TuningParams.fixed(d, c, lam)


def label_ranks(ranks: np.ndarray, d1: int, i_c: int, i_lambda: int) -> np.ndarray:
    labels = np.zeros(ranks.shape[0], dtype=int)
    labels[ranks >= d1 - i_c + 1] = 1
    labels[ranks <= d1 - i_lambda] = -1
    return labels


def assign_labels(scores: ScoreTable, params: TuningParams) -> np.ndarray:
    if params.d1 != scores.d1:
        raise ParameterError(f"parameters are for d1={params.d1}, score table has d1={scores.d1}")
    return label_ranks(scores.ranks, params.d1, params.i_c, params.i_lambda)


def ordinal_probabilities(d1: int, i_c: int, i_lambda: int) -> List[List[Fraction]]:
    """
    Exact mirandom map: entry [r-1][j-1] is the probability that a decoy win
    with rank r selects the j-th largest knockoff score.
    """
    TuningParams(d1, i_c, i_lambda)
    m = d1 - i_lambda
    width = Fraction(i_c, m)
    table = []
    for r in range(1, m + 1):
        lo, hi = (r - 1) * width, r * width
        row = []
        for j in range(1, i_c + 1):
            overlap = min(hi, Fraction(j)) - max(lo, Fraction(j - 1))
            row.append(max(overlap, Fraction(0)) / width)
        table.append(row)
    return table


def mirandom_select(scores: ScoreTable, labels: np.ndarray, params: TuningParams,
                    rng: np.random.Generator) -> np.ndarray:
    """
    Selected score W per feature.

    Original wins keep Z. Decoy wins map rank r onto [(r-1)*i_c/m, r*i_c/m)
    with m = d1 - i_lambda; a uniform point of that interval picks the knockoff
    ordinal (1 = largest), so straddled cells are chosen in proportion to
    their overlap. Ignored features get one of their d1 scores at random.
    """
    p = scores.p
    position = rng.random(p)
    pick = rng.integers(0, params.d1, size=p)

    w = scores.original.copy()
    decoy = labels == -1
    if decoy.any():
        ordered = -np.sort(-scores.knockoff[decoy], axis=1)
        ordinal = np.floor((scores.ranks[decoy] - 1 + position[decoy]) * params.i_c / params.decoy_ranks)
        ordinal = np.minimum(ordinal.astype(int), params.i_c - 1)
        w[decoy] = ordered[np.arange(ordered.shape[0]), ordinal]
    ignored = labels == 0
    w[ignored] = scores.scores[ignored, pick[ignored]]
    return w


@dataclass
class CompetitionOutcome:
    labels: np.ndarray
    w: np.ndarray
    order: np.ndarray
    params: TuningParams


class Selection(NamedTuple):
    discoveries: np.ndarray
    i_star: int
    order: Optional[np.ndarray] = None  # strongest first, when the caller has no outcome


def compete(scores: ScoreTable, params: TuningParams, rng: np.random.Generator) -> CompetitionOutcome:
    """Labels, selected scores and the W-descending order (random tie-break)"""
    labels = assign_labels(scores, params)
    order_keys = rng.random(scores.p)
    w = mirandom_select(scores, labels, params, rng)
    order = np.lexsort((order_keys, -w))
    return CompetitionOutcome(labels, w, order, params)


def alpha_fraction(alpha: float) -> Fraction:
    if not 0 <= alpha <= 1:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return Fraction(repr(float(alpha))).limit_denominator(ALPHA_DENOMINATOR_LIMIT)


def threshold_prefix(ordered_labels: np.ndarray, alpha: float, i_c: int, decoy_ranks: int) -> int:
    """
    Length of the longest prefix with (1 + D) / max(T, 1) * c/(1-lam) <= alpha,
    evaluated in integers as (1 + D) * i_c <= alpha * max(T, 1) * (d1 - i_lambda).
    """
    if ordered_labels.size == 0:
        return 0
    frac = alpha_fraction(alpha)
    decoys = np.cumsum(ordered_labels == -1, dtype=np.int64)
    targets = np.cumsum(ordered_labels == 1, dtype=np.int64)
    lhs = (1 + decoys) * i_c * frac.denominator
    rhs = frac.numerator * np.maximum(targets, 1) * decoy_ranks
    passing = np.flatnonzero(lhs <= rhs)
    return int(passing[-1]) + 1 if passing.size else 0


def select_discoveries(outcome: CompetitionOutcome, alpha: float) -> Selection:
    ordered = outcome.labels[outcome.order]
    i_star = threshold_prefix(ordered, alpha, outcome.params.i_c, outcome.params.decoy_ranks)
    top = outcome.order[:i_star]
    return Selection(np.sort(top[outcome.labels[top] == 1]), i_star)


def knockoff_plus_reference(z, z_tilde, alpha: float, rng: np.random.Generator,
                            tie_seed: Optional[int] = None) -> Selection:
    """
    Single-knockoff selection on signed statistics.

    A feature counts as positive when its original beats its knockoff; the
    statistic magnitude is the larger of the pair. The threshold is the
    strongest-first cutoff with (1 + #negatives) / max(#positives, 1) <= alpha.
    Ties are broken with draws from tie_seed (pair ties) and rng (equal
    magnitudes), consuming the same streams as rank_scores and compete.
    """
    z = np.asarray(z, dtype=float)
    z_tilde = np.asarray(z_tilde, dtype=float)
    if z.shape != z_tilde.shape or z.ndim != 1:
        raise ParameterError("z and z_tilde must be vectors of equal length")
    p = z.size
    tie_rng = np.random.default_rng(tie_seed) if tie_seed is not None else rng
    keys = tie_rng.random((p, 2))
    positive = (z > z_tilde) | ((z == z_tilde) & (keys[:, 1] < keys[:, 0]))
    magnitude = np.maximum(z, z_tilde)

    order_keys = rng.random(p)
    strongest = np.lexsort((order_keys, -magnitude))
    bound = alpha_fraction(alpha)
    k = positives = negatives = 0
    for step, i in enumerate(strongest, start=1):
        if positive[i]:
            positives += 1
        else:
            negatives += 1
        if Fraction(1 + negatives, max(positives, 1)) <= bound:
            k = step
    top = strongest[:k]
    return Selection(np.sort(top[positive[top]]), k, strongest)

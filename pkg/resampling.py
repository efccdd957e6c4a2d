#!/usr/bin/env python3
"""
Model-aware bootstrap tuning of the competition parameters.

A preliminary competition fixes a conjectured set of true features; responses
resampled from the least-squares fit on random subsets of that set are
scored against the already constructed knockoffs, and the (c, lambda) pair
(and optionally d) maximizing the average number of conjectured true
discoveries is applied to the real data.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg

from competition import (CompetitionOutcome, Selection, TuningParams, compete,
                         select_discoveries)
from errors import ParameterError
from knockoffs import DesignData, KnockoffSet
from lasso import SEED_BOUND, ScoreTable, ScoringOptions, score_knockoffs

logger = logging.getLogger(__name__)


def estimate_lambda0(scores: ScoreTable) -> float:
    """
    Storey-style choice of the null-region threshold on the rank grid.

    Uses empirical p-values (d1 - r + 1)/d1 and returns the candidate i/d1,
    i <= d1//2, with the smallest estimated null proportion (ties go to the
    larger candidate).
    """
    d1 = scores.d1
    pvalues = (d1 - scores.ranks + 1) / d1
    best_i, best_pi0 = 1, np.inf
    for i in range(1, d1 // 2 + 1):
        lam = i / d1
        pi0 = min(1.0, np.sum(pvalues > lam) / (scores.p * (1 - lam)))
        if pi0 <= best_pi0:
            best_i, best_pi0 = i, pi0
    return best_i / d1


@dataclass
class ConjectureModel:
    lambda0: float
    w_fixed: np.ndarray
    l_fixed: np.ndarray
    p_false: np.ndarray
    params: TuningParams


def build_conjecture(scores: ScoreTable, lambda0: float, rng: np.random.Generator) -> ConjectureModel:
    d1 = scores.d1
    i0 = int(round(lambda0 * d1))
    if abs(i0 - lambda0 * d1) > 1e-9 or not 1 <= i0 <= d1 // 2:
        raise ParameterError(f"lambda0={lambda0} is not on the grid i/{d1}, i <= {d1 // 2}")
    params = TuningParams(d1, i0, i0)
    outcome = compete(scores, params, rng)

    ordered = outcome.labels[outcome.order]
    decoys = np.cumsum(ordered == -1)
    targets = np.cumsum(ordered == 1)
    fdr_hat = (1 + decoys) / np.maximum(targets, 1) * params.i_c / params.decoy_ranks

    p_false = np.zeros(scores.p)
    wins = ordered == 1
    p_false[outcome.order[wins]] = np.clip(1 - fdr_hat[wins], 0.0, 1.0)
    logger.debug(f"Conjecture at lambda0={lambda0:.3f}: {int(wins.sum())} original wins, "
                 f"expected {p_false.sum():.2f} true features")
    return ConjectureModel(lambda0, outcome.w, outcome.labels, p_false, params)


@dataclass
class BootstrapSample:
    index: int
    seed: int
    y: np.ndarray
    true_features: np.ndarray
    tables: Dict[int, ScoreTable]
    fingerprints: Dict[int, str] = field(default_factory=dict)


def _bootstrap_one(index: int, seed: int, x: np.ndarray, y: np.ndarray, p_false: np.ndarray,
                   sigma_hat: float, knockoff_sets: Dict[int, KnockoffSet],
                   options: ScoringOptions) -> BootstrapSample:
    rng = np.random.default_rng(seed)
    true_features = np.flatnonzero(rng.random(p_false.size) < p_false)
    if true_features.size:
        beta, _, _, _ = linalg.lstsq(x[:, true_features], y)
        mean = x[:, true_features] @ beta
    else:
        mean = np.zeros(x.shape[0])
    y_boot = mean + sigma_hat * rng.standard_normal(x.shape[0])

    tables, fingerprints = {}, {}
    for d in sorted(knockoff_sets):
        ks = knockoff_sets[d]
        rows = ks.n_rows
        tables[d] = score_knockoffs(ks, x[:rows], y_boot[:rows], options,
                                    np.random.default_rng([seed, d]))
        fingerprints[d] = ks.fingerprint
    return BootstrapSample(index, seed, y_boot, true_features, tables, fingerprints)


def draw_bootstrap(data: DesignData, conjecture: ConjectureModel, d_list: Sequence[int],
                   knockoff_sets: Dict[int, KnockoffSet], sigma_hat: float, m_b: int,
                   rng: np.random.Generator, options: Optional[ScoringOptions] = None,
                   n_jobs: int = 1) -> List[BootstrapSample]:
    """
    m_b model-aware bootstrap samples.

    ``data`` must be extended for the largest d; every smaller d scores the
    row prefix matching its own knockoffs.
    """
    if m_b < 1:
        raise ParameterError(f"m_b must be >= 1, got {m_b}")
    if sigma_hat is None or sigma_hat < 0:
        raise ParameterError(f"sigma_hat must be non-negative, got {sigma_hat}")
    sets = {d: knockoff_sets[d] for d in sorted(set(d_list))}
    longest = max(ks.n_rows for ks in sets.values())
    if data.n < longest:
        raise ParameterError(f"design has {data.n} rows, knockoffs need {longest}")
    options = options or ScoringOptions(d_max=max(sets))
    seeds = [int(s) for s in rng.integers(0, SEED_BOUND, size=m_b)]

    logger.info(f"Drawing {m_b} bootstrap samples for d in {sorted(sets)}")
    samples = Parallel(n_jobs=n_jobs)(
        delayed(_bootstrap_one)(l, seeds[l], data.x, data.y, conjecture.p_false, sigma_hat, sets, options)
        for l in range(m_b)
    )
    return list(samples)


def candidate_params(d: int) -> List[TuningParams]:
    """All (i_c, i_lambda) with 1 <= i_c <= i_lambda <= (d+1)//2, ordered by (i_lambda, i_c)"""
    d1 = d + 1
    return [TuningParams(d1, i_c, i_lambda)
            for i_lambda in range(1, d1 // 2 + 1)
            for i_c in range(1, i_lambda + 1)]


def _true_discoveries(sample: BootstrapSample, d: int, params: TuningParams, alpha: float) -> int:
    rng = np.random.default_rng([sample.seed, d, params.i_c, params.i_lambda])
    outcome = compete(sample.tables[d], params, rng)
    selection = select_discoveries(outcome, alpha)
    return int(np.intersect1d(selection.discoveries, sample.true_features).size)


def grid_objectives(samples: Sequence[BootstrapSample], d: int, alpha: float) -> pd.DataFrame:
    """Mean conjectured true discoveries for every candidate pair at one d"""
    if not samples:
        raise ParameterError("need at least one bootstrap sample")
    rows = []
    for params in candidate_params(d):
        counts = [_true_discoveries(sample, d, params, alpha) for sample in samples]
        rows.append({**params.as_dict(), 'objective': float(np.mean(counts))})
    return pd.DataFrame(rows)


def _best_row(objectives: pd.DataFrame) -> pd.Series:
    # rows are in (i_lambda, i_c) order, idxmax keeps the first maximum
    return objectives.loc[objectives['objective'].idxmax()]


def optimize_c_lambda(samples: Sequence[BootstrapSample], d: int, alpha: float) -> TuningParams:
    best = _best_row(grid_objectives(samples, d, alpha))
    return TuningParams(d + 1, int(best['i_c']), int(best['i_lambda']))


@dataclass
class TuneResult:
    d: int
    params: TuningParams
    objective: float
    selection: Selection
    objectives: pd.DataFrame
    outcome: Optional[CompetitionOutcome] = None


def _check_same_knockoffs(ks: KnockoffSet, samples: Sequence[BootstrapSample], d: int):
    expected = ks.fingerprint
    for sample in samples:
        if sample.fingerprints.get(d) != expected:
            raise ParameterError(f"bootstrap sample {sample.index} was scored against different "
                                 f"d={d} knockoffs than the real data")


def _apply_best(scores: ScoreTable, objectives: pd.DataFrame, d: int, alpha: float,
                rng: np.random.Generator) -> TuneResult:
    best = _best_row(objectives)
    params = TuningParams(d + 1, int(best['i_c']), int(best['i_lambda']))
    outcome = compete(scores, params, rng)
    selection = select_discoveries(outcome, alpha)
    logger.debug(f"multi-knockoff d={d}: c={params.c:.3f}, lambda={params.lam:.3f}, "
                 f"objective={best['objective']:.3f}, {selection.discoveries.size} discoveries")
    return TuneResult(d, params, float(best['objective']), selection, objectives, outcome)


def multi_knockoff(knockoffs: KnockoffSet, scores: ScoreTable, samples: Sequence[BootstrapSample],
                   d: int, alpha: float, rng: np.random.Generator) -> TuneResult:
    """Tune (c, lambda) on the bootstrap samples, then select on the real scores"""
    _check_same_knockoffs(knockoffs, samples, d)
    return _apply_best(scores, grid_objectives(samples, d, alpha), d, alpha, rng)


def multi_knockoff_select(knockoff_sets: Dict[int, KnockoffSet], scores_per_d: Dict[int, ScoreTable],
                          samples: Sequence[BootstrapSample], d_list: Sequence[int], alpha: float,
                          rng: np.random.Generator) -> TuneResult:
    """Pick the d whose best pair has the largest objective (ties go to the smaller d)"""
    best_d, best_obj, tables = None, -np.inf, {}
    for d in sorted(set(d_list)):
        _check_same_knockoffs(knockoff_sets[d], samples, d)
        tables[d] = grid_objectives(samples, d, alpha)
        value = float(tables[d]['objective'].max())
        if value > best_obj:
            best_d, best_obj = d, value
    result = _apply_best(scores_per_d[best_d], tables[best_d], best_d, alpha, rng)
    result.objectives = pd.concat(tables.values(), ignore_index=True)
    logger.info(f"multi-knockoff-select chose d={best_d} (objective {best_obj:.3f})")
    return result

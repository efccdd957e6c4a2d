#!/usr/bin/env python3
"""
Lasso entry scores for originals and knockoffs.

Solves (1/2n)||y - Xb||^2 + lam*||b||_1 along a shared, exponentially spaced
grid with scikit-learn's warm-started cyclic coordinate descent and records,
for every column, the largest grid value at which its coefficient is nonzero.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from sklearn import linear_model
from sklearn.exceptions import ConvergenceWarning

from errors import DegenerateGridError, DimensionError, ParameterError, SolverError
from knockoffs import KnockoffSet

logger = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-7
MAX_SWEEPS = 100_000
PATH_CHUNK = 64
SEED_BOUND = 2 ** 63 - 1


@dataclass
class LambdaGrid:
    values: np.ndarray
    lambda_max: float
    grid_ratio: float

    @property
    def count(self) -> int:
        return int(self.values.size)


def grid_count(p: int, d_max: int, multiplier: int = 5) -> int:
    """Number of grid values, multiplier * (1 + d_max) * p"""
    return int(multiplier * (1 + d_max) * p)


def make_grid(columns, y, n: int, count: int, grid_ratio: float = 1e-3) -> LambdaGrid:
    if count < 2:
        raise ParameterError(f"grid needs at least 2 values, got {count}")
    if not 0 < grid_ratio < 1:
        raise ParameterError(f"grid_ratio must lie in (0, 1), got {grid_ratio}")
    if isinstance(columns, np.ndarray):
        stacked = columns.reshape(columns.shape[0], -1)
    else:
        stacked = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    y = np.asarray(y, dtype=float).ravel()
    lambda_max = float(np.abs(stacked.T @ y).max() / n)
    if lambda_max <= 0:
        raise DegenerateGridError("response is orthogonal to every column; lambda_max is 0")
    values = np.geomspace(lambda_max, lambda_max * grid_ratio, count)
    return LambdaGrid(values, lambda_max, grid_ratio)


@dataclass
class LassoPath:
    grid: LambdaGrid
    entry_index: np.ndarray
    permutation: np.ndarray
    sweeps: int = 0
    coefs: Optional[np.ndarray] = None
    iterations: Optional[np.ndarray] = None  # sweeps per grid value

    @property
    def entry_lambda(self) -> np.ndarray:
        """Entry score per column, 0 for columns that never enter"""
        scores = np.zeros(self.entry_index.size)
        entered = self.entry_index >= 0
        scores[entered] = self.grid.values[self.entry_index[entered]]
        return scores


def lasso_path(xaug: np.ndarray, y: np.ndarray, grid: LambdaGrid, rng: np.random.Generator,
               tol: float = CONVERGENCE_TOL, max_iter: int = MAX_SWEEPS,
               return_coefs: bool = False) -> LassoPath:
    """
    Warm-started coordinate descent over the descending grid.

    Columns are permuted with rng and then updated cyclically by scikit-learn's
    Gram-based solver, which gets max_iter sweeps at every grid value. tol
    follows scikit-learn: a relative coefficient-change trigger followed by a
    duality-gap check scaled by ||y||^2. The grid is solved in chunks so the
    path can stop once every column has entered.
    """
    xaug = np.asarray(xaug, dtype=float)
    y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
    n, m = xaug.shape
    if y.size != n:
        raise DimensionError(f"response has {y.size} rows, design has {n}")

    perm = rng.permutation(m)
    x = np.asfortranarray(xaug[:, perm])
    gram = np.ascontiguousarray(x.T @ x)
    if np.any(np.diag(gram) <= 0):
        raise ParameterError("design has zero columns")
    xy = np.ascontiguousarray(x.T @ y)
    y_norm2 = float(y @ y)

    b = np.zeros(m)
    entry = np.full(m, -1, dtype=int)
    iterations = np.zeros(grid.count, dtype=int)
    coefs = np.zeros((grid.count, m)) if return_coefs else None

    # a zero response has the zero path; the solver's gap test never passes on it
    start = 0 if y_norm2 > 0 else grid.count
    while start < grid.count:
        alphas = grid.values[start:start + PATH_CHUNK]
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', ConvergenceWarning)
            _, chunk, gaps, n_iters = linear_model.lasso_path(
                x, y, alphas=alphas, precompute=gram, Xy=xy, copy_X=False, coef_init=b,
                return_n_iter=True, tol=tol, max_iter=max_iter)
        n_iters = np.asarray(n_iters, dtype=int)
        # gaps come back divided by n; the solver compares n*gap with tol*||y||^2
        stalled = np.flatnonzero((n_iters >= max_iter) & (gaps * n >= tol * y_norm2))
        if stalled.size:
            k = start + int(stalled[0])
            raise SolverError(f"coordinate descent did not converge within {max_iter} sweeps "
                              f"at lambda index {k}", lambda_index=k)

        stop = start + alphas.size
        iterations[start:stop] = n_iters
        for offset in range(alphas.size):
            newly = (entry < 0) & (chunk[:, offset] != 0)
            entry[newly] = start + offset
        if coefs is not None:
            coefs[start:stop] = chunk.T
        b = np.asfortranarray(chunk[:, -1])
        start = stop
        if coefs is None and (entry >= 0).all():
            logger.debug(f"all {m} columns entered by lambda index {stop - 1}; stopping early")
            break

    inverse = np.empty(m, dtype=int)
    inverse[perm] = np.arange(m)
    entry_out = entry[inverse]
    if coefs is not None:
        coefs = coefs[:, inverse]
    return LassoPath(grid=grid, entry_index=entry_out, permutation=perm,
                     sweeps=int(iterations.sum()), coefs=coefs, iterations=iterations)


def rank_scores(scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rank of column 0 within each row (1 = lowest), ties broken uniformly"""
    keys = rng.random(scores.shape)
    original = scores[:, :1]
    below = (scores[:, 1:] < original) | ((scores[:, 1:] == original) & (keys[:, 1:] < keys[:, :1]))
    return 1 + below.sum(axis=1)


@dataclass
class ScoreTable:
    """
    Entry scores of every feature and its d knockoffs.

    ``scores[:, 0]`` are the originals, ``scores[:, 1:]`` the knockoff copies;
    ``ranks`` is the rank of the original within its row (d+1 = best).
    """
    d: int
    scores: np.ndarray
    ranks: np.ndarray
    tie_seed: Optional[int] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.ranks = np.asarray(self.ranks, dtype=int)
        if self.scores.ndim != 2 or self.scores.shape[1] != self.d + 1:
            raise DimensionError(f"scores must be p x {self.d + 1}, got {self.scores.shape}")
        if self.ranks.shape != (self.scores.shape[0],):
            raise DimensionError("ranks must hold one entry per feature")
        if self.ranks.size and (self.ranks.min() < 1 or self.ranks.max() > self.d + 1):
            raise ParameterError(f"ranks must lie in [1, {self.d + 1}]")

    @property
    def p(self) -> int:
        return self.scores.shape[0]

    @property
    def d1(self) -> int:
        return self.d + 1

    @property
    def original(self) -> np.ndarray:
        return self.scores[:, 0]

    @property
    def knockoff(self) -> np.ndarray:
        return self.scores[:, 1:]

    @classmethod
    def from_scores(cls, scores, tie_seed: int) -> 'ScoreTable':
        scores = np.asarray(scores, dtype=float)
        ranks = rank_scores(scores, np.random.default_rng(tie_seed))
        return cls(scores.shape[1] - 1, scores, ranks, tie_seed)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.scores, columns=[f"z{j}" for j in range(self.d1)])
        frame.insert(0, 'feature_id', np.arange(self.p))
        frame['rank'] = self.ranks
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, tie_seed: Optional[int] = None) -> 'ScoreTable':
        score_cols = [c for c in frame.columns if str(c).startswith('z') and str(c)[1:].isdigit()]
        score_cols.sort(key=lambda c: int(str(c)[1:]))
        if len(score_cols) < 2 or 'rank' not in frame.columns:
            raise ParameterError("score table needs columns z0, z1, ... and rank")
        if 'feature_id' in frame.columns:
            frame = frame.sort_values('feature_id')
        return cls(len(score_cols) - 1, frame[score_cols].to_numpy(dtype=float),
                   frame['rank'].to_numpy(dtype=int), tie_seed)


def entry_scores(paths: Sequence[LassoPath], feature_maps: Sequence[np.ndarray],
                 p: int, d: int, rng: np.random.Generator) -> ScoreTable:
    """
    Collect entry scores into a p x (d+1) table.

    Each path only contributes the columns its feature map assigns to a
    feature of its own batch; originals fitted outside their batch are ignored.
    """
    if len(paths) != len(feature_maps):
        raise DimensionError("need one feature map per path")
    scores = np.full((p, d + 1), np.nan)
    for path, fmap in zip(paths, feature_maps):
        values = path.entry_lambda
        keep = fmap[:, 0] >= 0
        scores[fmap[keep, 0], fmap[keep, 1]] = values[keep]
    if np.isnan(scores).any():
        raise DimensionError("feature maps do not cover every (feature, copy) pair")
    tie_seed = int(rng.integers(0, SEED_BOUND))
    return ScoreTable.from_scores(scores, tie_seed)


@dataclass
class ScoringOptions:
    nlambda_multiplier: int = 5
    grid_ratio: float = 1e-3
    d_max: Optional[int] = None
    tol: float = CONVERGENCE_TOL
    max_iter: int = MAX_SWEEPS

    def count(self, p: int, d: int) -> int:
        return grid_count(p, self.d_max if self.d_max is not None else d, self.nlambda_multiplier)


def score_knockoffs(ks: KnockoffSet, x: np.ndarray, y: np.ndarray, options: ScoringOptions,
                    rng: np.random.Generator) -> ScoreTable:
    """Fit one path per batch on [X, X~^I] over a grid shared by all batches"""
    n = ks.n_rows
    if x.shape[0] != n or np.asarray(y).size != n:
        raise DimensionError(f"design/response rows must match knockoff rows ({n})")
    n_batches = len(ks.partition.batches)
    grid = make_grid(np.hstack([x, ks.matrix]), y, n, options.count(ks.p, ks.d), options.grid_ratio)
    seeds = rng.integers(0, SEED_BOUND, size=n_batches + 1)

    paths, maps = [], []
    for j in range(n_batches):
        xaug, fmap = ks.augmented(x, j)
        paths.append(lasso_path(xaug, y, grid, np.random.default_rng(int(seeds[j])),
                                tol=options.tol, max_iter=options.max_iter))
        maps.append(fmap)
        logger.debug(f"Scored batch {j + 1}/{n_batches} ({paths[-1].sweeps} sweeps)")
    return entry_scores(paths, maps, ks.p, ks.d, np.random.default_rng(int(seeds[-1])))

#!/usr/bin/env python3
"""
End-to-end selection on one dataset: extension, knockoffs per d, entry
scores and every selection method, with lazily built and cached stages.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from competition import (CompetitionOutcome, Selection, TuningParams, compete,
                         knockoff_plus_reference, parse_fixed, select_discoveries)
from errors import ParameterError
from knockoffs import (PARTITION_METHODS, DesignData, KnockoffSet, construct_knockoffs,
                       estimate_sigma, extend_design, make_partition, take_rows)
from lasso import ScoreTable, ScoringOptions, score_knockoffs
from resampling import (BootstrapSample, ConjectureModel, build_conjecture, draw_bootstrap,
                        estimate_lambda0, multi_knockoff, multi_knockoff_select)

logger = logging.getLogger(__name__)

# stream keys for default_rng([*seed, key, ...])
EXTEND, PARTITION, CONSTRUCT, SCORE, CONJECTURE, BOOTSTRAP, SELECT = range(1, 8)

FIXED_METHODS = ('knockoff+', 'mirror', 'max', 'fixed')
TUNED_METHODS = ('multi-knockoff', 'multi-knockoff-select')

Seed = Union[int, Sequence[int]]


def seed_entropy(seed: Seed) -> Tuple[int, ...]:
    return (int(seed),) if np.isscalar(seed) else tuple(int(s) for s in seed)


def stage_rng(seed: Seed, *keys: int) -> np.random.Generator:
    return np.random.default_rng([*seed_entropy(seed), *keys])


def parse_method(method: str) -> Tuple[str, Optional[str]]:
    """Split 'fixed:1/4,1/2' into ('fixed', '1/4,1/2'); validate the name"""
    name, _, arg = method.partition(':')
    name = name.strip()
    if name not in FIXED_METHODS + TUNED_METHODS:
        raise ParameterError(f"unknown method '{method}'")
    if name == 'fixed' and not arg:
        raise ParameterError("method 'fixed' needs parameters, e.g. 'fixed:1/4,1/2'")
    if name != 'fixed' and arg:
        raise ParameterError(f"method '{name}' takes no parameters")
    return name, (arg or None)


def method_params(method: str, d: int) -> Optional[TuningParams]:
    name, arg = parse_method(method)
    if name == 'mirror':
        return TuningParams.mirror(d)
    if name == 'max':
        return TuningParams.max_method(d)
    if name == 'fixed':
        return parse_fixed(arg, d)
    return None


@dataclass
class MethodResult:
    method: str
    d: int
    selection: Selection
    params: Optional[TuningParams] = None
    objective: Optional[float] = None
    outcome: Optional[CompetitionOutcome] = None
    objectives: Optional[pd.DataFrame] = None

    @property
    def discoveries(self) -> np.ndarray:
        return self.selection.discoveries


class KnockoffPipeline:
    """
    Knockoff selection for one (X, y).

    The design is extended once for the largest d; each d uses the row
    prefix of length max(n, (d+1)p). Knockoffs, score tables and the
    bootstrap samples are built on first use and cached, so every method
    run on this pipeline shares them.
    """

    def __init__(self, data: DesignData, d_list: Sequence[int], batches: int = 1,
                 partition: str = 'clustered', sigma_known: Optional[float] = None,
                 options: Optional[ScoringOptions] = None, m_b: int = 32,
                 seed: Seed = 0, n_jobs: int = 1):
        if not d_list or any(int(d) < 1 for d in d_list):
            raise ParameterError(f"d_list must hold positive integers, got {list(d_list)}")
        if partition not in PARTITION_METHODS:
            raise ParameterError(f"unknown partition method '{partition}'")
        self.data = data
        self.d_list = sorted({int(d) for d in d_list})
        self.batches = batches
        self.partition = partition
        self.sigma_known = sigma_known
        self.options = options or ScoringOptions(d_max=self.d_max)
        if self.options.d_max is None:
            self.options = replace(self.options, d_max=self.d_max)
        self.m_b = m_b
        self.seed = seed_entropy(seed)
        self.n_jobs = n_jobs

        if sigma_known is not None:
            self.sigma_hat = float(sigma_known)
        elif data.n > data.p:
            self.sigma_hat = estimate_sigma(data.x, data.y)
        else:
            self.sigma_hat = None
        self.extended = self._extend()
        self._knockoffs: Dict[int, KnockoffSet] = {}
        self._scores: Dict[int, ScoreTable] = {}
        self._conjecture: Optional[ConjectureModel] = None
        self._samples: Optional[List[BootstrapSample]] = None

    @property
    def d_max(self) -> int:
        return max(self.d_list)

    def _rng(self, *keys: int) -> np.random.Generator:
        return stage_rng(self.seed, *keys)

    def _extend(self) -> DesignData:
        if self.data.n >= (self.d_max + 1) * self.data.p:
            return replace(self.data, sigma_hat=self.sigma_hat)
        return extend_design(self.data, self.d_max, self.sigma_known, self._rng(EXTEND))

    def design_for(self, d: int) -> DesignData:
        rows = max(self.data.n, (d + 1) * self.data.p)
        if rows > self.extended.n:
            raise ParameterError(f"d={d} exceeds the largest configured d={self.d_max}")
        return take_rows(self.extended, rows)

    def knockoffs(self, d: int) -> KnockoffSet:
        if d not in self._knockoffs:
            design = self.design_for(d)
            partition = make_partition(self.data.x, self.batches, self.partition, self._rng(PARTITION, d))
            self._knockoffs[d] = construct_knockoffs(design, d, partition, self._rng(CONSTRUCT, d))
        return self._knockoffs[d]

    def scores(self, d: int) -> ScoreTable:
        if d not in self._scores:
            design = self.design_for(d)
            self._scores[d] = score_knockoffs(self.knockoffs(d), design.x, design.y,
                                              self.options, self._rng(SCORE, d))
        return self._scores[d]

    def conjecture(self) -> ConjectureModel:
        if self._conjecture is None:
            table = self.scores(self.d_max)
            lambda0 = estimate_lambda0(table)
            self._conjecture = build_conjecture(table, lambda0, self._rng(CONJECTURE))
        return self._conjecture

    def bootstrap_samples(self) -> List[BootstrapSample]:
        if self._samples is None:
            sets = {d: self.knockoffs(d) for d in self.d_list}
            self._samples = draw_bootstrap(self.extended, self.conjecture(), self.d_list, sets,
                                           self.sigma_hat, self.m_b, self._rng(BOOTSTRAP),
                                           self.options, self.n_jobs)
        return self._samples

    def default_rng(self, d: int) -> np.random.Generator:
        """Competition stream for one d, shared by every method run at that d"""
        return self._rng(SELECT, d)

    def run(self, method: str, alpha: float, d: Optional[int] = None,
            rng: Optional[np.random.Generator] = None) -> MethodResult:
        """
        Run one selection method at threshold alpha.

        ``knockoff+`` always uses d=1; ``multi-knockoff-select`` searches the
        whole d_list; the other methods need d (default: the largest d).
        """
        name, _ = parse_method(method)
        if name == 'knockoff+':
            d = 1
        elif name == 'multi-knockoff-select':
            d = None
        elif d is None:
            d = self.d_max
        rng = rng or self.default_rng(d or 0)

        if name == 'knockoff+':
            table = self.scores(1)
            selection = knockoff_plus_reference(table.scores[:, 0], table.scores[:, 1], alpha, rng,
                                                tie_seed=table.tie_seed)
            return MethodResult(method, 1, selection, TuningParams.mirror(1))
        if name == 'multi-knockoff':
            if d not in self.d_list:
                raise ParameterError(f"multi-knockoff needs d in d_list {self.d_list}, got {d}")
            tuned = multi_knockoff(self.knockoffs(d), self.scores(d), self.bootstrap_samples(),
                                   d, alpha, rng)
            return MethodResult(method, d, tuned.selection, tuned.params, tuned.objective,
                                tuned.outcome, tuned.objectives)
        if name == 'multi-knockoff-select':
            sets = {k: self.knockoffs(k) for k in self.d_list}
            tables = {k: self.scores(k) for k in self.d_list}
            tuned = multi_knockoff_select(sets, tables, self.bootstrap_samples(), self.d_list, alpha, rng)
            return MethodResult(method, tuned.d, tuned.selection, tuned.params, tuned.objective,
                                tuned.outcome, tuned.objectives)

        params = method_params(method, d)
        outcome = compete(self.scores(d), params, rng)
        return MethodResult(method, d, select_discoveries(outcome, alpha), params, outcome=outcome)

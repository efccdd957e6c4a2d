#!/usr/bin/env python3
"""
Tests for the bootstrap tuning of (c, lambda) and d
"""

from dataclasses import replace

import numpy as np
import pytest

from competition import TuningParams, compete, select_discoveries
from errors import ParameterError
from knockoffs import BatchPartition, DesignData, construct_knockoffs
from lasso import ScoreTable, ScoringOptions
from resampling import (ConjectureModel, build_conjecture, candidate_params, draw_bootstrap,
                        estimate_lambda0, grid_objectives, multi_knockoff, multi_knockoff_select,
                        optimize_c_lambda)

D_LIST = [1, 3]


def rank_table(ranks, d):
    ranks = np.asarray(ranks)
    scores = np.zeros((ranks.size, d + 1))
    return ScoreTable(d, scores, ranks)


@pytest.fixture(scope='module')
def setup():
    rng = np.random.default_rng(0)
    n, p = 40, 5
    x = rng.standard_normal((n, p))
    raw = DesignData.from_arrays(x)
    y = 4 * raw.x[:, 0] + 3 * raw.x[:, 1] + 0.5 * rng.standard_normal(n)
    data = replace(raw, y=y)
    sets = {d: construct_knockoffs(data, d, BatchPartition.single(p), np.random.default_rng(d))
            for d in D_LIST}
    return data, sets


def conjecture_with(p_false):
    p_false = np.asarray(p_false, dtype=float)
    zeros = np.zeros(p_false.size)
    return ConjectureModel(0.5, zeros, zeros.astype(int), p_false, TuningParams.mirror(1))


def test_estimate_lambda0_examples():
    assert estimate_lambda0(rank_table([4, 4, 4, 1], 3)) == 0.25
    # equal estimates go to the larger threshold
    assert estimate_lambda0(rank_table([1, 2, 3, 4] * 5, 3)) == 0.5
    assert estimate_lambda0(rank_table([2, 1], 1)) == 0.5


def test_estimate_lambda0_under_the_null():
    d1, p = 4, 10_000
    ranks = np.random.default_rng(1).integers(1, d1 + 1, size=p)
    lam = estimate_lambda0(rank_table(ranks, d1 - 1))
    assert lam in (0.25, 0.5)
    pvalues = (d1 - ranks + 1) / d1
    pi0 = np.sum(pvalues > lam) / (p * (1 - lam))
    assert pi0 > 1 - 3 * np.sqrt(lam / (1 - lam) / p)


def test_conjecture_without_wins():
    conjecture = build_conjecture(rank_table([1, 2, 3, 1], 3), 0.25, np.random.default_rng(0))
    np.testing.assert_array_equal(conjecture.p_false, 0.0)
    assert conjecture.params == TuningParams(4, 1, 1)


def test_conjecture_single_win():
    table = ScoreTable(3, np.array([[4.0, 1.0, 2.0, 3.0]]), np.array([4]))
    conjecture = build_conjecture(table, 0.25, np.random.default_rng(0))
    np.testing.assert_allclose(conjecture.p_false, [2 / 3])


def test_conjecture_rejects_off_grid_lambda0():
    with pytest.raises(ParameterError):
        build_conjecture(rank_table([1, 2], 3), 0.3, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        build_conjecture(rank_table([1, 2], 3), 0.75, np.random.default_rng(0))


def test_bootstrap_without_conjectured_features(setup):
    data, sets = setup
    samples = draw_bootstrap(data, conjecture_with(np.zeros(5)), D_LIST, sets, 1.0, 4,
                             np.random.default_rng(2))
    assert len(samples) == 4
    assert all(s.true_features.size == 0 for s in samples)
    assert len({s.seed for s in samples}) == 4
    for sample in samples:
        assert sorted(sample.tables) == D_LIST
        for d in D_LIST:
            assert sample.fingerprints[d] == sets[d].fingerprint
            assert sample.tables[d].p == 5


def test_bootstrap_is_deterministic(setup):
    data, sets = setup
    conjecture = conjecture_with([0.5] * 5)
    first = draw_bootstrap(data, conjecture, D_LIST, sets, 1.0, 3, np.random.default_rng(3))
    second = draw_bootstrap(data, conjecture, D_LIST, sets, 1.0, 3, np.random.default_rng(3))
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.true_features, b.true_features)
        for d in D_LIST:
            np.testing.assert_array_equal(a.tables[d].scores, b.tables[d].scores)


def test_bootstrap_signal_is_recovered(setup):
    data, sets = setup
    p_false = np.zeros(5)
    p_false[0] = 1.0
    samples = draw_bootstrap(data, conjecture_with(p_false), [1], {1: sets[1]}, 1e-6, 20,
                             np.random.default_rng(4), ScoringOptions(d_max=1))
    assert all(list(s.true_features) == [0] for s in samples)
    wins = sum(int(s.tables[1].ranks[0] == 2) for s in samples)
    assert wins >= 19


def test_bootstrap_validation(setup):
    data, sets = setup
    with pytest.raises(ParameterError):
        draw_bootstrap(data, conjecture_with(np.zeros(5)), D_LIST, sets, 1.0, 0, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        draw_bootstrap(data, conjecture_with(np.zeros(5)), D_LIST, sets, None, 2, np.random.default_rng(0))


def test_candidate_params():
    pairs = [(t.i_c, t.i_lambda) for t in candidate_params(3)]
    assert pairs == [(1, 1), (1, 2), (2, 2)]
    assert [(t.i_c, t.i_lambda) for t in candidate_params(1)] == [(1, 1)]
    assert len(candidate_params(5)) == 6


@pytest.fixture(scope='module')
def samples(setup):
    data, sets = setup
    return draw_bootstrap(data, conjecture_with([0.9, 0.9, 0.1, 0.1, 0.1]), D_LIST, sets, 0.5, 6,
                          np.random.default_rng(5))


def test_grid_objectives_table(samples):
    objectives = grid_objectives(samples, 3, 0.2)
    assert list(objectives[['i_c', 'i_lambda']].itertuples(index=False, name=None)) == [(1, 1), (1, 2), (2, 2)]
    assert (objectives['objective'] >= 0).all()
    with pytest.raises(ParameterError):
        grid_objectives([], 3, 0.2)


def test_all_null_objective_picks_smallest_pair(samples):
    empty = [replace(s, true_features=np.array([], dtype=int)) for s in samples]
    objectives = grid_objectives(empty, 3, 0.5)
    assert (objectives['objective'] == 0).all()
    assert optimize_c_lambda(empty, 3, 0.5) == TuningParams(4, 1, 1)


def test_multi_knockoff_single_copy_is_mirror(setup, samples):
    data, sets = setup
    table = samples[0].tables[1]
    tuned = multi_knockoff(sets[1], table, samples, 1, 0.3, np.random.default_rng(6))
    mirror = select_discoveries(compete(table, TuningParams.mirror(1), np.random.default_rng(6)), 0.3)
    assert tuned.params == TuningParams.mirror(1)
    np.testing.assert_array_equal(tuned.selection.discoveries, mirror.discoveries)


def test_multi_knockoff_alpha_zero(setup, samples):
    data, sets = setup
    tuned = multi_knockoff(sets[3], samples[0].tables[3], samples, 3, 0.0, np.random.default_rng(0))
    assert tuned.selection.discoveries.size == 0


def test_multi_knockoff_select_singleton(setup, samples):
    data, sets = setup
    tables = {d: samples[0].tables[d] for d in D_LIST}
    tuned = multi_knockoff_select(sets, tables, samples, [3], 0.3, np.random.default_rng(0))
    assert tuned.d == 3
    assert set(tuned.objectives['d']) == {3}


def test_multi_knockoff_select_ties_go_to_smaller_d(setup, samples):
    data, sets = setup
    empty = [replace(s, true_features=np.array([], dtype=int)) for s in samples]
    tables = {d: samples[0].tables[d] for d in D_LIST}
    tuned = multi_knockoff_select(sets, tables, empty, D_LIST, 0.3, np.random.default_rng(0))
    assert tuned.d == 1
    assert tuned.objective == 0.0
    assert sorted(set(tuned.objectives['d'])) == D_LIST


def test_fingerprint_mismatch_is_rejected(setup, samples):
    data, sets = setup
    other = construct_knockoffs(data, 3, BatchPartition.single(5), np.random.default_rng(99))
    with pytest.raises(ParameterError):
        multi_knockoff(other, samples[0].tables[3], samples, 3, 0.3, np.random.default_rng(0))

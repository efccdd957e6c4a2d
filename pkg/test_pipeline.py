#!/usr/bin/env python3
"""
Tests for the cached end-to-end selection pipeline
"""

from dataclasses import replace

import numpy as np
import pytest

from competition import TuningParams
from errors import EstimationError, ParameterError
from knockoffs import DesignData
from pipeline import (KnockoffPipeline, method_params, parse_method, seed_entropy, stage_rng)


def signal_data(n, p, k=3, amplitude=5.0, seed=0):
    rng = np.random.default_rng(seed)
    raw = DesignData.from_arrays(rng.standard_normal((n, p)))
    beta = np.zeros(p)
    beta[:k] = amplitude
    return replace(raw, y=raw.x @ beta + rng.standard_normal(n))


def test_parse_method():
    assert parse_method('mirror') == ('mirror', None)
    assert parse_method('fixed:1/4,1/2') == ('fixed', '1/4,1/2')
    for bad in ('lasso', 'fixed', 'mirror:1/2,1/2'):
        with pytest.raises(ParameterError):
            parse_method(bad)


def test_method_params():
    assert method_params('mirror', 3) == TuningParams(4, 2, 2)
    assert method_params('max', 3) == TuningParams(4, 1, 1)
    assert method_params('fixed:1/4,1/2', 3) == TuningParams(4, 1, 2)
    assert method_params('multi-knockoff', 3) is None


def test_stage_streams_are_keyed():
    assert seed_entropy(7) == (7,)
    assert seed_entropy([7, 2]) == (7, 2)
    a = stage_rng(7, 4, 1).random(3)
    np.testing.assert_array_equal(a, stage_rng((7,), 4, 1).random(3))
    assert not np.array_equal(a, stage_rng(7, 4, 2).random(3))


def test_extension_is_shared_across_d():
    data = signal_data(12, 4, k=1)
    pipeline = KnockoffPipeline(data, [1, 3], seed=1)
    assert pipeline.extended.n == 16
    np.testing.assert_array_equal(pipeline.extended.y[:12], data.y)
    assert pipeline.design_for(1).n == 12
    assert pipeline.design_for(3).n == 16
    assert pipeline.knockoffs(1).n_rows == 12
    assert pipeline.knockoffs(3).n_rows == 16
    assert pipeline.knockoffs(3).extended_rows == 4
    with pytest.raises(ParameterError):
        pipeline.design_for(5)


def test_stages_are_cached():
    pipeline = KnockoffPipeline(signal_data(40, 6), [2], seed=2)
    assert pipeline.knockoffs(2) is pipeline.knockoffs(2)
    assert pipeline.scores(2) is pipeline.scores(2)


def test_pipeline_validation():
    data = signal_data(20, 4)
    with pytest.raises(ParameterError):
        KnockoffPipeline(data, [])
    with pytest.raises(ParameterError):
        KnockoffPipeline(data, [0, 1])
    with pytest.raises(ParameterError):
        KnockoffPipeline(data, [1], partition='random')
    # no residual degrees of freedom to estimate sigma for the extension
    with pytest.raises(EstimationError):
        KnockoffPipeline(signal_data(4, 4, k=1), [1])


def test_known_sigma_skips_estimation():
    pipeline = KnockoffPipeline(signal_data(4, 4, k=1), [1], sigma_known=1.0)
    assert pipeline.sigma_hat == 1.0
    assert pipeline.extended.n == 8


def test_same_seed_same_result():
    data = signal_data(60, 10)
    first = KnockoffPipeline(data, [3], seed=11).run('mirror', 0.2)
    second = KnockoffPipeline(data, [3], seed=11).run('mirror', 0.2)
    np.testing.assert_array_equal(first.discoveries, second.discoveries)
    assert first.d == 3


def test_knockoff_plus_matches_mirror_at_one_copy():
    data = signal_data(60, 10, seed=3)
    pipeline = KnockoffPipeline(data, [1, 2], seed=5)
    for alpha in (0.1, 0.3, 0.5):
        plus = pipeline.run('knockoff+', alpha, d=2)
        mirror = pipeline.run('mirror', alpha, d=1)
        assert plus.d == 1
        np.testing.assert_array_equal(plus.discoveries, mirror.discoveries)
        assert plus.selection.i_star == mirror.selection.i_star


def test_fixed_and_max_methods():
    pipeline = KnockoffPipeline(signal_data(60, 10, seed=4), [3], seed=6)
    fixed = pipeline.run('fixed:1/4,1/2', 0.3)
    assert fixed.params == TuningParams(4, 1, 2)
    assert fixed.outcome is not None
    assert pipeline.run('max', 0.3).params == TuningParams.max_method(3)


def test_tuned_methods():
    pipeline = KnockoffPipeline(signal_data(60, 8, seed=5), [1, 3], m_b=4, seed=7)
    tuned = pipeline.run('multi-knockoff', 0.2, d=3)
    assert tuned.d == 3
    assert len(tuned.objectives) == 3
    assert tuned.objective == tuned.objectives['objective'].max()
    assert len(pipeline.bootstrap_samples()) == 4

    chosen = pipeline.run('multi-knockoff-select', 0.2)
    assert chosen.d in (1, 3)
    assert sorted(set(chosen.objectives['d'])) == [1, 3]
    with pytest.raises(ParameterError):
        pipeline.run('multi-knockoff', 0.2, d=2)

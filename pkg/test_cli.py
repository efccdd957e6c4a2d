#!/usr/bin/env python3
"""
Tests for the command-line interface
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from cli import FLOAT_FORMAT, main, parse_config
from errors import ConfigError, InputError
from knockoffs import DesignData
from pipeline import KnockoffPipeline

SIMULATION_CONFIG = """\
n: 40
p: 8
k: 3
amplitude: 5
d_list: [1, 2]
methods: [mirror, max]
alphas: [0.1, 0.2]
replicates: 2
seed: 3
"""


def write_csv(path, values, columns):
    pd.DataFrame(values, columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return str(path)


@pytest.fixture
def regression_files(tmp_path):
    rng = np.random.default_rng(0)
    n, p = 50, 8
    x = rng.standard_normal((n, p))
    y = x[:, :3] @ np.array([3.0, -3.0, 3.0]) + rng.standard_normal(n)
    x_path = write_csv(tmp_path / 'x.csv', x, [f"f{i}" for i in range(p)])
    y_path = write_csv(tmp_path / 'y.csv', y[:, None], ['y'])
    return x, y, x_path, y_path


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def test_parse_config(tmp_path):
    good = tmp_path / 'good.yaml'
    good.write_text(SIMULATION_CONFIG)
    cfg = parse_config(str(good))
    assert cfg.d_list == [1, 2]
    assert cfg.amplitude == 5.0

    empty = tmp_path / 'empty.yaml'
    empty.write_text('')
    with pytest.raises(ConfigError):
        parse_config(str(empty))
    broken = tmp_path / 'broken.yaml'
    broken.write_text('n: [1, 2\n')
    with pytest.raises(ConfigError):
        parse_config(str(broken))
    with pytest.raises(InputError):
        parse_config(str(tmp_path / 'missing.yaml'))


def test_select_hand_made_table(tmp_path, capsys):
    scores = pd.DataFrame({'feature_id': [0, 1, 2, 3], 'z0': [4.0, 3.0, 0.0, 1.0],
                           'z1': [0.0, 0.0, 2.0, 0.0], 'rank': [2, 2, 1, 2]})
    scores.to_csv(tmp_path / 'scores.csv', index=False)
    out = tmp_path / 'out'
    code = main(['select', '--scores', str(tmp_path / 'scores.csv'), '--method', 'mirror',
                 '--alpha', '0.5', '--out', str(out)])
    assert code == 0
    assert 'i_star=2, discoveries=2' in capsys.readouterr().out
    found = pd.read_csv(out / 'discoveries.csv')
    assert list(found['feature_id']) == [0, 1]
    assert list(found['order_index']) == [1, 2]
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'ok'
    assert manifest['subcommand'] == 'select'
    assert str(tmp_path / 'scores.csv') in manifest['inputs']


def test_missing_input_exits_with_io_code(tmp_path):
    out = tmp_path / 'out'
    code = main(['select', '--scores', str(tmp_path / 'nope.csv'), '--alpha', '0.1', '--out', str(out)])
    assert code == 3
    assert not out.exists()


def test_bad_config_exits_with_config_code(tmp_path):
    config = tmp_path / 'bad.yaml'
    config.write_text(SIMULATION_CONFIG + 'replicate: 4\n')
    out = tmp_path / 'out'
    assert main(['simulate', '--config', str(config), '--out', str(out)]) == 2
    assert not out.exists()


def test_select_rejects_tuned_methods(tmp_path):
    pd.DataFrame({'z0': [1.0], 'z1': [0.0], 'rank': [2]}).to_csv(tmp_path / 's.csv', index=False)
    code = main(['select', '--scores', str(tmp_path / 's.csv'), '--alpha', '0.1',
                 '--method', 'multi-knockoff', '--out', str(tmp_path / 'out')])
    assert code == 2


def test_construct_score_select_matches_pipeline(tmp_path, regression_files):
    x, y, x_path, y_path = regression_files
    built, scored, selected = (str(tmp_path / name) for name in ('built', 'scored', 'selected'))
    assert main(['construct', '--x', x_path, '--y', y_path, '--d', '1', '--seed', '7', '--out', built]) == 0
    meta = json.loads(open(os.path.join(built, 'knockoffs.json')).read())
    assert meta['max_gram_deviation'] <= 1e-6
    assert main(['score', '--knockoffs', built, '--seed', '7', '--out', scored]) == 0
    assert main(['select', '--scores', os.path.join(scored, 'scores.csv'), '--method', 'mirror',
                 '--alpha', '0.5', '--seed', '7', '--out', selected]) == 0

    pipeline = KnockoffPipeline(DesignData.from_arrays(x, y), [1], seed=7)
    table = pipeline.scores(1)
    cli_scores = pd.read_csv(os.path.join(scored, 'scores.csv'), float_precision='round_trip')
    np.testing.assert_array_equal(cli_scores[['z0', 'z1']].to_numpy(), table.scores)
    np.testing.assert_array_equal(cli_scores['rank'].to_numpy(), table.ranks)

    expected = pipeline.run('mirror', 0.5, d=1)
    found = pd.read_csv(os.path.join(selected, 'discoveries.csv'))
    np.testing.assert_array_equal(found['feature_id'].to_numpy(), expected.discoveries)


def test_tampered_knockoffs_are_rejected(tmp_path, regression_files):
    _, _, x_path, y_path = regression_files
    built = str(tmp_path / 'built')
    assert main(['construct', '--x', x_path, '--y', y_path, '--d', '2', '--out', built]) == 0
    path = os.path.join(built, 'knockoffs.csv')
    frame = pd.read_csv(path, float_precision='round_trip')
    frame.iloc[0, 0] += 1e-3
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    assert main(['score', '--knockoffs', built, '--out', str(tmp_path / 'scored')]) == 3


def test_select_reruns_are_byte_identical(tmp_path, regression_files):
    _, _, x_path, y_path = regression_files
    built, scored = str(tmp_path / 'built'), str(tmp_path / 'scored')
    assert main(['construct', '--x', x_path, '--y', y_path, '--d', '3', '--out', built]) == 0
    assert main(['score', '--knockoffs', built, '--out', scored]) == 0
    outputs = []
    for run in ('first', 'second'):
        out = str(tmp_path / run)
        assert main(['select', '--scores', os.path.join(scored, 'scores.csv'), '--method', 'fixed:1/4,1/2',
                     '--alpha', '0.3', '--out', out]) == 0
        outputs.append(read_bytes(os.path.join(out, 'discoveries.csv')))
    assert outputs[0] == outputs[1]


def test_tune_writes_choice(tmp_path, regression_files):
    _, _, x_path, y_path = regression_files
    out = tmp_path / 'tuned'
    assert main(['tune', '--x', x_path, '--y', y_path, '--d-list', '1,2', '--mb', '3',
                 '--alpha', '0.2', '--out', str(out)]) == 0
    chosen = json.loads((out / 'chosen.json').read_text())
    assert chosen['method'] == 'multi-knockoff-select'
    assert chosen['d'] in (1, 2)
    objectives = pd.read_csv(out / 'objectives.csv')
    assert sorted(objectives['d'].unique()) == [1, 2]
    assert (out / 'discoveries.csv').exists()


def test_simulate_and_report(tmp_path):
    config = tmp_path / 'sim.yaml'
    config.write_text(SIMULATION_CONFIG)
    records = []
    for run in ('first', 'second'):
        out = tmp_path / run
        assert main(['simulate', '--config', str(config), '--out', str(out)]) == 0
        records.append(read_bytes(out / 'records.csv'))
    assert records[0] == records[1]
    frame = pd.read_csv(tmp_path / 'first' / 'records.csv')
    assert len(frame) == 2 * 4 * 2
    manifest = json.loads((tmp_path / 'first' / 'manifest.json').read_text())
    assert manifest['seed'] == 3
    assert manifest['config']['replicates'] == 2

    reported = tmp_path / 'report'
    assert main(['report', '--curves', str(tmp_path / 'first' / 'curves.csv'), '--svg',
                 '--out', str(reported)]) == 0
    for name in ('curves_long.csv', 'curves.xlsx', 'power.svg', 'fdr_ratio.svg'):
        assert (reported / name).exists()


def test_knockoff_plus_order_index_breaks_ties(tmp_path):
    scores = pd.DataFrame({'feature_id': [0, 1, 2], 'z0': [3.0, 3.0, 0.0],
                           'z1': [0.0, 0.0, 1.0], 'rank': [2, 2, 1]})
    scores.to_csv(tmp_path / 'scores.csv', index=False)
    out = tmp_path / 'out'
    assert main(['select', '--scores', str(tmp_path / 'scores.csv'), '--method', 'knockoff+',
                 '--alpha', '1.0', '--out', str(out)]) == 0
    found = pd.read_csv(out / 'discoveries.csv')
    assert list(found['feature_id']) == [0, 1]
    assert sorted(found['order_index']) == [1, 2]


def test_score_rejects_swapped_design_and_response(tmp_path, regression_files):
    x, _, x_path, y_path = regression_files
    built = str(tmp_path / 'built')
    assert main(['construct', '--x', x_path, '--y', y_path, '--d', '1', '--out', built]) == 0
    response = os.path.join(built, 'response.csv')
    original = read_bytes(response)

    write_csv(response, np.arange(x.shape[0], dtype=float)[:, None], ['y'])
    assert main(['score', '--knockoffs', built, '--out', str(tmp_path / 'swapped_y')]) == 3
    assert main(['score', '--knockoffs', built, '--y', response,
                 '--out', str(tmp_path / 'explicit_y')]) == 0

    with open(response, 'wb') as f:
        f.write(original)
    design = os.path.join(built, 'design.csv')
    frame = pd.read_csv(design, float_precision='round_trip')
    frame.iloc[0, 0] += 1e-3
    frame.to_csv(design, index=False, float_format=FLOAT_FORMAT)
    assert main(['score', '--knockoffs', built, '--out', str(tmp_path / 'swapped_x')]) == 3

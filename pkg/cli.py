#!/usr/bin/env python3
"""
Command-line interface for multiple-knockoff selection.

Subcommands:
  construct  build d knockoffs per feature for a design CSV
  score      lasso entry scores of originals and knockoffs
  select     competition + FDR threshold on a score table
  tune       multi-knockoff / multi-knockoff-select with bootstrap tuning
  simulate   Monte-Carlo experiment from a YAML config
  report     long-format curves, Excel workbook and SVG plots

Exit codes: 0 ok, 1 unexpected error, 2 configuration, 3 input I/O,
4 numerical failure, 5 solver non-convergence.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from competition import (CompetitionOutcome, Selection, compete, knockoff_plus_reference,
                         select_discoveries)
from errors import ConfigError, InputError, KnockoffError
from knockoffs import PARTITION_METHODS, BatchPartition, DesignData, KnockoffSet, verify_gram
from lasso import ScoreTable, ScoringOptions, score_knockoffs
from pipeline import (CONSTRUCT, EXTEND, PARTITION, SCORE, SELECT, KnockoffPipeline,
                      method_params, parse_method, stage_rng)
from simulate import ExperimentConfig, aggregate, paired_power_differences, report, run_experiment

logger = logging.getLogger(__name__)

__version__ = '0.1.0'

FLOAT_FORMAT = '%.17g'


def read_matrix(path: str) -> np.ndarray:
    """Numeric CSV with an optional header row"""
    if not os.path.isfile(path):
        raise InputError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(path, header=None, float_precision='round_trip')
        first = pd.to_numeric(frame.iloc[0], errors='coerce')
        if first.isna().any():
            frame = pd.read_csv(path, header=0, float_precision='round_trip')
        values = frame.apply(pd.to_numeric, errors='coerce').to_numpy(dtype=float)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise InputError(f"cannot parse {path}: {e}")
    if values.size == 0 or np.isnan(values).any():
        raise InputError(f"{path} has empty or non-numeric entries")
    return values


def read_vector(path: str) -> np.ndarray:
    values = read_matrix(path)
    if values.ndim != 2 or min(values.shape) != 1:
        raise InputError(f"{path} must hold a single column, got shape {values.shape}")
    return values.ravel()


def read_json(path: str) -> Dict:
    if not os.path.isfile(path):
        raise InputError(f"input file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"cannot parse {path}: {e}")


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def parse_config(path: str) -> ExperimentConfig:
    """Load and validate a YAML experiment config"""
    if not os.path.isfile(path):
        raise InputError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}")
    return ExperimentConfig.from_dict(raw or {})


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def write_json(path: str, payload: Dict):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, default=_json_default)


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_manifest(out_dir: str, subcommand: str, config: Dict, seed, inputs: List[str],
                   sub_seeds: Dict, started: str, status: str = 'ok', error: Optional[str] = None):
    manifest = {
        'subcommand': subcommand,
        'version': __version__,
        'status': status,
        'seed': seed,
        'config': config,
        'inputs': {path: file_digest(path) for path in inputs if os.path.isfile(path)},
        'sub_seeds': sub_seeds,
        'started_utc': started,
        'finished_utc': _utc_now(),
    }
    if error:
        manifest['error'] = error
    write_json(os.path.join(out_dir, 'manifest.json'), manifest)


def write_matrix(path: str, matrix: np.ndarray, columns: List[str]):
    pd.DataFrame(matrix, columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def discovery_frame(selection: Selection, outcome: CompetitionOutcome) -> pd.DataFrame:
    """feature_id, W, label and 1-based position in the W order of each discovery"""
    position = np.empty(outcome.order.size, dtype=int)
    position[outcome.order] = np.arange(1, outcome.order.size + 1)
    ids = selection.discoveries
    return pd.DataFrame({'feature_id': ids, 'W': outcome.w[ids], 'label': outcome.labels[ids],
                         'order_index': position[ids]})


class Command:
    """One subcommand: reads its inputs first, then writes into the output directory"""
    name = ''

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.seed = args.seed if args.seed is not None else 0
        self.inputs: List[str] = []
        self.sub_seeds: Dict = {}

    def load(self):
        raise NotImplementedError

    def execute(self, out_dir: str) -> str:
        raise NotImplementedError

    def config(self) -> Dict:
        return {k: v for k, v in vars(self.args).items() if k not in ('handler', 'verbose')}


class ConstructCommand(Command):
    name = 'construct'

    def load(self):
        self.inputs = [self.args.x] + ([self.args.y] if self.args.y else [])
        x = read_matrix(self.args.x)
        y = read_vector(self.args.y) if self.args.y else None
        if y is not None and y.size != x.shape[0]:
            raise InputError(f"response has {y.size} rows, design has {x.shape[0]}")
        self.data = DesignData.from_arrays(x, y)
        d = self.args.d
        if self.data.n < (d + 1) * self.data.p and y is None and self.args.sigma is None:
            raise ConfigError("the design must be extended; pass --y or --sigma")
        self.pipeline = KnockoffPipeline(self.data, [d], self.args.batches, self.args.partition,
                                         self.args.sigma, seed=self.seed)
        self.knockoffs = self.pipeline.knockoffs(d)

    def execute(self, out_dir: str) -> str:
        ks, d, p = self.knockoffs, self.args.d, self.data.p
        design = self.pipeline.design_for(d)
        report_ = verify_gram(design, ks)
        if not report_.passed:
            logger.warning(f"Gram deviation {report_.max_deviation:.3e} exceeds {report_.tol:g}")

        write_matrix(os.path.join(out_dir, 'design.csv'), design.x, [f"x{i}" for i in range(p)])
        write_matrix(os.path.join(out_dir, 'response.csv'), design.y[:, None], ['y'])
        write_matrix(os.path.join(out_dir, 'knockoffs.csv'), ks.matrix,
                     [f"x{i}_k{c + 1}" for c in range(d) for i in range(p)])
        write_json(os.path.join(out_dir, 'knockoffs.json'), {
            'd': d, 'p': p, 'n_rows': ks.n_rows, 'n_original': self.data.n_original,
            'extended_rows': ks.extended_rows, 'sigma_hat': ks.sigma_hat,
            'per_batch_s0': ks.per_batch_s0, 'partition': ks.partition.to_dict(),
            'column_norms': self.data.column_norms, 'fingerprint': ks.fingerprint,
            'max_gram_deviation': report_.max_deviation,
            'design_sha256': file_digest(os.path.join(out_dir, 'design.csv')),
            'response_sha256': file_digest(os.path.join(out_dir, 'response.csv')),
        })
        self.sub_seeds = {'extend': [self.seed, EXTEND], 'partition': [self.seed, PARTITION, d],
                          'construct': [self.seed, CONSTRUCT, d]}
        return (f"built d={d} knockoffs for p={p} features in {len(ks.per_batch_s0)} batch(es), "
                f"min s0={min(ks.per_batch_s0):.4f}")


def check_digest(path: str, expected: Optional[str], what: str):
    if expected is not None and file_digest(path) != expected:
        raise InputError(f"{what} file {path} differs from the one the knockoffs were built with")


def load_knockoffs(directory: str) -> KnockoffSet:
    meta = read_json(os.path.join(directory, 'knockoffs.json'))
    matrix = read_matrix(os.path.join(directory, 'knockoffs.csv'))
    partition = BatchPartition([np.asarray(b) for b in meta['partition']['batches']],
                               meta['partition']['method'])
    ks = KnockoffSet(d=int(meta['d']), matrix=matrix, per_batch_s0=list(meta['per_batch_s0']),
                     partition=partition, extended_rows=int(meta['extended_rows']),
                     sigma_hat=meta.get('sigma_hat'))
    if ks.fingerprint != meta['fingerprint']:
        raise InputError(f"knockoff matrix in {directory} does not match its recorded fingerprint")
    return ks


class ScoreCommand(Command):
    name = 'score'

    def load(self):
        directory = self.args.knockoffs
        x_path = self.args.x or os.path.join(directory, 'design.csv')
        y_path = self.args.y or os.path.join(directory, 'response.csv')
        self.inputs = [x_path, y_path, os.path.join(directory, 'knockoffs.csv'),
                       os.path.join(directory, 'knockoffs.json')]
        self.knockoffs = load_knockoffs(directory)
        self.x = read_matrix(x_path)
        self.y = read_vector(y_path)
        meta = read_json(os.path.join(directory, 'knockoffs.json'))
        check_digest(x_path, meta.get('design_sha256'), 'design')
        if not self.args.y:
            check_digest(y_path, meta.get('response_sha256'), 'response')

    def execute(self, out_dir: str) -> str:
        ks = self.knockoffs
        options = ScoringOptions(nlambda_multiplier=self.args.nlambda_multiplier,
                                 grid_ratio=self.args.grid_ratio,
                                 d_max=self.args.d_max if self.args.d_max else ks.d)
        table = score_knockoffs(ks, self.x, self.y, options, stage_rng(self.seed, SCORE, ks.d))
        table.to_frame().to_csv(os.path.join(out_dir, 'scores.csv'), index=False, float_format=FLOAT_FORMAT)
        write_json(os.path.join(out_dir, 'scores.json'), {
            'd': ks.d, 'tie_seed': table.tie_seed, 'grid_count': options.count(ks.p, ks.d),
            'grid_ratio': options.grid_ratio,
        })
        self.sub_seeds = {'score': [self.seed, SCORE, ks.d], 'tie_seed': table.tie_seed}
        wins = int(np.sum(table.ranks == table.d1))
        return f"scored {table.p} features with d={ks.d} knockoffs; {wins} originals ranked first"


def load_score_table(path: str) -> ScoreTable:
    if not os.path.isfile(path):
        raise InputError(f"input file not found: {path}")
    sidecar = os.path.join(os.path.dirname(path), 'scores.json')
    tie_seed = read_json(sidecar).get('tie_seed') if os.path.isfile(sidecar) else None
    return ScoreTable.from_frame(pd.read_csv(path, float_precision='round_trip'), tie_seed)


class SelectCommand(Command):
    name = 'select'

    def load(self):
        self.inputs = [self.args.scores]
        name, _ = parse_method(self.args.method)
        if name.startswith('multi-knockoff'):
            raise ConfigError(f"method '{name}' needs bootstrap tuning; use the tune subcommand")
        self.table = load_score_table(self.args.scores)
        if name == 'knockoff+' and self.table.d != 1:
            raise ConfigError(f"knockoff+ needs d=1 scores, got d={self.table.d}")

    def execute(self, out_dir: str) -> str:
        table, method, alpha = self.table, self.args.method, self.args.alpha
        rng = stage_rng(self.seed, SELECT, table.d)
        if parse_method(method)[0] == 'knockoff+':
            z, z_tilde = table.scores[:, 0], table.scores[:, 1]
            selection = knockoff_plus_reference(z, z_tilde, alpha, rng, tie_seed=table.tie_seed)
            w = np.maximum(z, z_tilde)
            ids = selection.discoveries
            position = np.empty(table.p, dtype=int)
            position[selection.order] = np.arange(1, table.p + 1)
            frame = pd.DataFrame({'feature_id': ids, 'W': w[ids], 'label': 1,
                                  'order_index': position[ids]})
        else:
            outcome = compete(table, method_params(method, table.d), rng)
            selection = select_discoveries(outcome, alpha)
            frame = discovery_frame(selection, outcome)
        frame.to_csv(os.path.join(out_dir, 'discoveries.csv'), index=False, float_format=FLOAT_FORMAT)
        self.sub_seeds = {'select': [self.seed, SELECT, table.d]}
        return f"i_star={selection.i_star}, discoveries={selection.discoveries.size}"


class TuneCommand(Command):
    name = 'tune'

    def load(self):
        self.inputs = [self.args.x, self.args.y]
        x = read_matrix(self.args.x)
        y = read_vector(self.args.y)
        if y.size != x.shape[0]:
            raise InputError(f"response has {y.size} rows, design has {x.shape[0]}")
        self.d_list = sorted({int(d) for d in self.args.d_list.split(',') if d.strip()})
        if not self.d_list:
            raise ConfigError("--d-list must name at least one d")
        options = ScoringOptions(nlambda_multiplier=self.args.nlambda_multiplier,
                                 grid_ratio=self.args.grid_ratio, d_max=max(self.d_list))
        self.pipeline = KnockoffPipeline(DesignData.from_arrays(x, y), self.d_list, self.args.batches,
                                         self.args.partition, self.args.sigma, options, self.args.mb,
                                         seed=self.seed, n_jobs=self.args.threads or 1)

    def execute(self, out_dir: str) -> str:
        method = 'multi-knockoff' if len(self.d_list) == 1 else 'multi-knockoff-select'
        result = self.pipeline.run(method, self.args.alpha, d=self.d_list[0])
        conjecture = self.pipeline.conjecture()
        write_json(os.path.join(out_dir, 'chosen.json'), {
            'method': method, **result.params.as_dict(), 'objective': result.objective,
            'lambda0': conjecture.lambda0, 'alpha': self.args.alpha, 'm_b': self.args.mb,
        })
        result.objectives.to_csv(os.path.join(out_dir, 'objectives.csv'), index=False,
                                 float_format=FLOAT_FORMAT)
        discovery_frame(result.selection, result.outcome).to_csv(
            os.path.join(out_dir, 'discoveries.csv'), index=False, float_format=FLOAT_FORMAT)
        self.sub_seeds = {'pipeline': [self.seed],
                          'bootstrap': [s.seed for s in self.pipeline.bootstrap_samples()]}
        return (f"chose d={result.d}, c={result.params.c:.3f}, lambda={result.params.lam:.3f}; "
                f"{result.discoveries.size} discoveries")


class SimulateCommand(Command):
    name = 'simulate'

    def load(self):
        self.inputs = [self.args.config]
        cfg = parse_config(self.args.config)
        overrides = {}
        if self.args.seed is not None:
            overrides['seed'] = self.args.seed
        if self.args.threads is not None:
            overrides['threads'] = self.args.threads
        self.cfg = replace(cfg, **overrides) if overrides else cfg
        self.seed = self.cfg.seed

    def config(self) -> Dict:
        return self.cfg.to_dict()

    def execute(self, out_dir: str) -> str:
        records = run_experiment(self.cfg)
        curves = aggregate(records, self.cfg.replicates)
        records.to_csv(os.path.join(out_dir, 'records.csv'), index=False, float_format=FLOAT_FORMAT)
        curves.to_csv(os.path.join(out_dir, 'curves.csv'), index=False, float_format=FLOAT_FORMAT)
        paired_power_differences(records).to_csv(os.path.join(out_dir, 'power_differences.csv'),
                                                 index=False, float_format=FLOAT_FORMAT)
        self.sub_seeds = {'replicates': [[self.cfg.seed, r] for r in range(self.cfg.replicates)]}
        failed = int((records['status'] != 'ok').sum())
        return f"{self.cfg.replicates} replicate(s), {len(records)} records, {failed} failed"


class ReportCommand(Command):
    name = 'report'

    def load(self):
        self.inputs = [self.args.curves]
        if not os.path.isfile(self.args.curves):
            raise InputError(f"input file not found: {self.args.curves}")
        self.curves = pd.read_csv(self.args.curves, float_precision='round_trip')
        missing = {'method', 'alpha', 'fdr', 'fdr_se', 'power', 'power_se', 'fdr_ratio'} - set(self.curves.columns)
        if missing:
            raise InputError(f"curves file lacks columns: {', '.join(sorted(missing))}")

    def execute(self, out_dir: str) -> str:
        written = report(self.curves, out_dir, svg=self.args.svg, excel=not self.args.no_excel)
        return f"wrote {', '.join(os.path.basename(p) for p in written)}"


COMMANDS = {cls.name: cls for cls in (ConstructCommand, ScoreCommand, SelectCommand,
                                       TuneCommand, SimulateCommand, ReportCommand)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='master seed (default 0, or the config seed)')
    common.add_argument('--threads', type=int, default=None, help='worker processes')
    common.add_argument('--out', default='knockoff_output', help='output directory')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(description='Multiple-knockoff FDR-controlled feature selection')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='subcommand', required=True)

    p = sub.add_parser('construct', parents=[common], help='build knockoffs')
    p.add_argument('--x', required=True, help='design matrix CSV')
    p.add_argument('--y', help='response CSV (needed when the design must be extended)')
    p.add_argument('--d', type=int, default=1, help='knockoffs per feature')
    p.add_argument('--batches', type=int, default=1)
    p.add_argument('--partition', choices=PARTITION_METHODS, default='clustered')
    p.add_argument('--sigma', type=float, default=None, help='known noise level for the extension')

    p = sub.add_parser('score', parents=[common], help='lasso entry scores')
    p.add_argument('--knockoffs', required=True, help='output directory of construct')
    p.add_argument('--x', help='design CSV (default: <knockoffs>/design.csv)')
    p.add_argument('--y', help='response CSV (default: <knockoffs>/response.csv)')
    p.add_argument('--nlambda-multiplier', type=int, default=5)
    p.add_argument('--grid-ratio', type=float, default=1e-3)
    p.add_argument('--d-max', type=int, default=None, help='d used for the grid size (default: d)')

    p = sub.add_parser('select', parents=[common], help='competition and FDR threshold')
    p.add_argument('--scores', required=True, help='score table CSV')
    p.add_argument('--method', default='mirror', help="mirror, max, knockoff+ or fixed:c,lambda")
    p.add_argument('--alpha', type=float, required=True)

    p = sub.add_parser('tune', parents=[common], help='multi-knockoff(-select)')
    p.add_argument('--x', required=True)
    p.add_argument('--y', required=True)
    p.add_argument('--d-list', default='1', help='comma separated, e.g. 1,3,5')
    p.add_argument('--batches', type=int, default=1)
    p.add_argument('--partition', choices=PARTITION_METHODS, default='clustered')
    p.add_argument('--mb', type=int, default=32, help='bootstrap samples')
    p.add_argument('--alpha', type=float, required=True)
    p.add_argument('--sigma', type=float, default=None)
    p.add_argument('--nlambda-multiplier', type=int, default=5)
    p.add_argument('--grid-ratio', type=float, default=1e-3)

    p = sub.add_parser('simulate', parents=[common], help='Monte-Carlo experiment')
    p.add_argument('--config', required=True, help='YAML config (see example_config.yaml)')

    p = sub.add_parser('report', parents=[common], help='curves to long CSV, Excel and SVG')
    p.add_argument('--curves', required=True, help='curves CSV written by simulate')
    p.add_argument('--svg', action='store_true')
    p.add_argument('--no-excel', action='store_true')
    return parser


def run(subcommand: str, args: argparse.Namespace) -> int:
    """Run one subcommand; returns the process exit code"""
    started = _utc_now()
    command = COMMANDS[subcommand](args)
    out_dir, error = None, None
    try:
        command.load()
        out_dir = args.out
        os.makedirs(out_dir, exist_ok=True)
        summary = command.execute(out_dir)
    except KnockoffError as e:
        error, code = str(e), e.exit_code
        logger.error(f"{subcommand} failed: {e}")
        print(f"❌ {subcommand} failed: {e}")
    except OSError as e:
        error, code = str(e), InputError.exit_code
        logger.error(f"{subcommand} failed: {e}")
        print(f"❌ {subcommand} failed: {e}")
    except Exception as e:
        error, code = str(e), KnockoffError.exit_code
        logger.exception(f"{subcommand} failed unexpectedly")
        print(f"❌ {subcommand} failed: {e}")
    else:
        write_manifest(out_dir, subcommand, command.config(), command.seed, command.inputs,
                       command.sub_seeds, started)
        print(f"✅ {subcommand}: {summary}")
        print(f"📁 Outputs in {out_dir}")
        return 0

    if out_dir is not None and os.path.isdir(out_dir):
        write_manifest(out_dir, subcommand, command.config(), command.seed, command.inputs,
                       command.sub_seeds, started, status='failed', error=error)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    return run(args.subcommand, args)


if __name__ == "__main__":
    sys.exit(main())

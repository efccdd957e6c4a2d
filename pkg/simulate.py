#!/usr/bin/env python3
"""
Monte-Carlo harness: synthetic regression datasets, replicate runs of every
configured method over the threshold grid, FDR/power curves and the
null-win exchangeability diagnostic.
"""

import itertools
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg
from scipy.stats import norm

from competition import TuningParams, compete, label_ranks
from errors import ConfigError, KnockoffError, ParameterError
from knockoffs import PARTITION_METHODS, DesignData
from lasso import ScoreTable, ScoringOptions
from pipeline import KnockoffPipeline, method_params, parse_method

logger = logging.getLogger(__name__)

COVARIANCE_KINDS = ('toeplitz', 'equicorrelated')
DIAGNOSTIC_KEY = 0x6E756C6C

# 0.001..0.009, 0.01..0.29, 0.30..0.95
DEFAULT_ALPHAS = tuple(
    [round(0.001 * i, 3) for i in range(1, 10)]
    + [round(0.01 * i, 2) for i in range(1, 30)]
    + [round(0.30 + 0.05 * i, 2) for i in range(14)]
)

RECORD_COLUMNS = ['method', 'replicate', 'alpha', 'discoveries', 'fdp', 'power',
                  'd', 'c', 'lambda', 'status', 'stage']


@dataclass
class ExperimentConfig:
    n: int
    p: int
    k: int
    amplitude: float
    covariance: str = 'toeplitz'
    rho: float = 0.0
    d_list: List[int] = field(default_factory=lambda: [1])
    batches: int = 1
    partition: str = 'clustered'
    methods: List[str] = field(default_factory=lambda: ['mirror', 'max'])
    alphas: List[float] = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    replicates: int = 100
    m_b: int = 32
    seed: int = 0
    sigma_known: Optional[float] = None
    nlambda_multiplier: int = 5
    grid_ratio: float = 1e-3
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> 'ExperimentConfig':
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if self.n <= self.p:
            raise ConfigError(f"n must exceed p, got n={self.n}, p={self.p}")
        if not 0 <= self.k <= self.p:
            raise ConfigError(f"k must lie in [0, p={self.p}], got {self.k}")
        if self.covariance not in COVARIANCE_KINDS:
            raise ConfigError(f"covariance must be one of {COVARIANCE_KINDS}, got '{self.covariance}'")
        if not 0 <= self.rho < 1:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if not self.d_list or any(d < 1 for d in self.d_list):
            raise ConfigError(f"d_list must hold positive integers, got {self.d_list}")
        if not 1 <= self.batches <= self.p:
            raise ConfigError(f"batches must lie in [1, p], got {self.batches}")
        if self.partition not in PARTITION_METHODS:
            raise ConfigError(f"partition must be one of {PARTITION_METHODS}, got '{self.partition}'")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for method in self.methods:
            name, _ = parse_method(method)
            if name == 'fixed':
                for d in self.d_list:
                    method_params(method, d)
        alphas = np.asarray(self.alphas, dtype=float)
        if alphas.size == 0 or alphas.min() <= 0 or alphas.max() >= 1 or np.any(np.diff(alphas) <= 0):
            raise ConfigError("alphas must be strictly increasing inside (0, 1)")
        if self.replicates < 1 or self.m_b < 1 or self.threads < 1 or self.nlambda_multiplier < 1:
            raise ConfigError("replicates, m_b, threads and nlambda_multiplier must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.sigma_known is not None and self.sigma_known <= 0:
            raise ConfigError(f"sigma_known must be positive, got {self.sigma_known}")
        if not 0 < self.grid_ratio < 1:
            raise ConfigError(f"grid_ratio must lie in (0, 1), got {self.grid_ratio}")
        return self

    @classmethod
    def from_dict(cls, raw: Dict) -> 'ExperimentConfig':
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of keys to values")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        missing = [name for name in ('n', 'p', 'k', 'amplitude') if name not in raw]
        if missing:
            raise ConfigError(f"missing required config key(s): {', '.join(missing)}")
        return cls(**{key: _coerce(key, value) for key, value in raw.items()})

    def to_dict(self) -> Dict:
        return asdict(self)

    def scoring_options(self) -> ScoringOptions:
        return ScoringOptions(nlambda_multiplier=self.nlambda_multiplier,
                              grid_ratio=self.grid_ratio, d_max=max(self.d_list))


_SCHEMA = {
    'n': int, 'p': int, 'k': int, 'amplitude': float, 'covariance': str, 'rho': float,
    'd_list': [int], 'batches': int, 'partition': str, 'methods': [str], 'alphas': [float],
    'replicates': int, 'm_b': int, 'seed': int, 'sigma_known': float,
    'nlambda_multiplier': int, 'grid_ratio': float, 'threads': int,
}


def _coerce_scalar(key: str, value, kind):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"config key '{key}' expects a string, got {value!r}")
    return value


def _coerce(key: str, value):
    kind = _SCHEMA[key]
    if key == 'sigma_known' and value is None:
        return None
    if isinstance(kind, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{key}' expects a list, got {value!r}")
        return [_coerce_scalar(key, item, kind[0]) for item in value]
    return _coerce_scalar(key, value, kind)


def covariance_matrix(kind: str, p: int, rho: float) -> np.ndarray:
    if not 0 <= rho < 1:
        raise ParameterError(f"rho must lie in [0, 1), got {rho}")
    if kind == 'toeplitz':
        return linalg.toeplitz(rho ** np.arange(p))
    if kind == 'equicorrelated':
        return (1 - rho) * np.eye(p) + rho * np.ones((p, p))
    raise ParameterError(f"unknown covariance '{kind}'")


@dataclass
class SimulationTruth:
    beta: np.ndarray
    support: np.ndarray

    @property
    def k(self) -> int:
        return int(self.support.size)

    @property
    def null_mask(self) -> np.ndarray:
        mask = np.ones(self.beta.size, dtype=bool)
        mask[self.support] = False
        return mask


def generate_dataset(cfg: ExperimentConfig, rng: np.random.Generator) -> Tuple[DesignData, SimulationTruth]:
    """Gaussian rows, unit-norm columns, K signals of amplitude +-A, N(0, 1) noise"""
    cov = covariance_matrix(cfg.covariance, cfg.p, cfg.rho)
    chol = linalg.cholesky(cov, lower=True)
    x = rng.standard_normal((cfg.n, cfg.p)) @ chol.T
    data = DesignData.from_arrays(x)

    support = np.sort(rng.choice(cfg.p, size=cfg.k, replace=False))
    beta = np.zeros(cfg.p)
    beta[support] = cfg.amplitude * rng.choice([-1.0, 1.0], size=cfg.k)
    y = data.x @ beta + rng.standard_normal(cfg.n)
    return replace(data, y=y), SimulationTruth(beta, support)


@dataclass
class ExperimentRecord:
    method: str
    replicate: int
    alpha: float
    discoveries: int
    fdp: float
    power: Optional[float]
    d: Optional[int] = None
    c: Optional[float] = None
    lam: Optional[float] = None
    status: str = 'ok'
    stage: str = ''

    def to_dict(self) -> Dict:
        row = asdict(self)
        row['lambda'] = row.pop('lam')
        return row


def method_labels(cfg: ExperimentConfig) -> List[Tuple[str, str, Optional[int]]]:
    """(label, method, d) per run; fixed-d methods are expanded over d_list"""
    labels = []
    for method in cfg.methods:
        name, _ = parse_method(method)
        if name == 'knockoff+':
            labels.append((method, method, 1))
        elif name == 'multi-knockoff-select':
            labels.append((method, method, None))
        else:
            labels.extend((f"{method}[d={d}]", method, d) for d in sorted(set(cfg.d_list)))
    return labels


def discovery_metrics(discoveries: np.ndarray, truth: SimulationTruth) -> Tuple[float, Optional[float]]:
    """FDP and power (None when there are no true features)"""
    true_hits = int(np.isin(discoveries, truth.support).sum())
    fdp = (discoveries.size - true_hits) / max(discoveries.size, 1)
    power = true_hits / truth.k if truth.k else None
    return fdp, power


def _failed(label: str, replicate: int, alphas: Sequence[float], d: Optional[int], stage: str):
    return [ExperimentRecord(label, replicate, alpha, 0, np.nan, None, d, status='failed', stage=stage)
            for alpha in alphas]


def _needed_d(method: str, d: Optional[int], d_list: Sequence[int]) -> List[int]:
    name, _ = parse_method(method)
    if name == 'knockoff+':
        return [1]
    if name in ('multi-knockoff', 'multi-knockoff-select'):
        return sorted(set(d_list))
    return [d]


def _run_method(pipeline: KnockoffPipeline, truth: SimulationTruth, cfg: ExperimentConfig,
                replicate: int, label: str, method: str, d: Optional[int]) -> List[ExperimentRecord]:
    stage = 'construct'
    try:
        needed = _needed_d(method, d, cfg.d_list)
        for dd in needed:
            pipeline.knockoffs(dd)
        stage = 'score'
        for dd in needed:
            pipeline.scores(dd)
        stage = 'tune' if method.startswith('multi-knockoff') else 'select'
        records = []
        for alpha in cfg.alphas:
            result = pipeline.run(method, alpha, d, pipeline.default_rng(d or 0))
            fdp, power = discovery_metrics(result.discoveries, truth)
            params = result.params
            records.append(ExperimentRecord(
                label, replicate, alpha, int(result.discoveries.size), fdp, power, result.d,
                params.c if params else None, params.lam if params else None))
        return records
    except KnockoffError as e:
        logger.error(f"Replicate {replicate}, {label}: {stage} failed: {e}")
        return _failed(label, replicate, cfg.alphas, d, stage)


def run_replicate(cfg: ExperimentConfig, replicate: int) -> List[ExperimentRecord]:
    """Every configured method on one dataset; failures are recorded, not raised"""
    labels = method_labels(cfg)
    rng = np.random.default_rng([cfg.seed, replicate])
    try:
        data, truth = generate_dataset(cfg, rng)
        pipeline = KnockoffPipeline(data, cfg.d_list, cfg.batches, cfg.partition, cfg.sigma_known,
                                    cfg.scoring_options(), cfg.m_b, seed=(cfg.seed, replicate))
    except KnockoffError as e:
        logger.error(f"Replicate {replicate}: data generation failed: {e}")
        return [rec for label, _, d in labels for rec in _failed(label, replicate, cfg.alphas, d, 'generate')]

    records = []
    for label, method, d in labels:
        records.extend(_run_method(pipeline, truth, cfg, replicate, label, method, d))
    return records


def records_frame(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in records], columns=RECORD_COLUMNS)


def run_experiment(cfg: ExperimentConfig, n_jobs: Optional[int] = None) -> pd.DataFrame:
    """All replicates, in parallel; rows sorted by (replicate, method, alpha)"""
    n_jobs = n_jobs or cfg.threads
    logger.info(f"Running {cfg.replicates} replicate(s) of {len(method_labels(cfg))} method run(s) "
                f"on {n_jobs} worker(s)")
    batches = Parallel(n_jobs=n_jobs)(delayed(run_replicate)(cfg, r) for r in range(cfg.replicates))
    frame = records_frame([rec for batch in batches for rec in batch])
    frame = frame.sort_values(['replicate', 'method', 'alpha'], kind='mergesort').reset_index(drop=True)
    failed = frame.loc[frame['status'] != 'ok', 'replicate'].nunique()
    if failed:
        logger.warning(f"{failed} replicate(s) had at least one failed method")
    return frame


def aggregate(records: pd.DataFrame, replicates: Optional[int] = None) -> pd.DataFrame:
    """Per (method, alpha): empirical FDR, power, standard errors and FDR/alpha"""
    ok = records[records['status'] == 'ok'].copy()
    ok['fdp'] = ok['fdp'].astype(float)
    ok['power'] = pd.to_numeric(ok['power'], errors='coerce')
    curves = ok.groupby(['method', 'alpha'], sort=True).agg(
        fdr=('fdp', 'mean'), fdr_sd=('fdp', 'std'),
        power=('power', 'mean'), power_sd=('power', 'std'),
        n_ok=('fdp', 'size'), n_power=('power', 'count'),
        discoveries=('discoveries', 'mean'),
    ).reset_index()
    curves['fdr_se'] = (curves['fdr_sd'] / np.sqrt(curves['n_ok'])).fillna(0.0)
    curves['power_se'] = (curves['power_sd'] / np.sqrt(curves['n_power'].clip(lower=1))).fillna(0.0)
    curves.loc[curves['n_power'] == 0, 'power_se'] = np.nan
    curves['fdr_ratio'] = curves['fdr'] / curves['alpha']
    total = replicates if replicates is not None else records['replicate'].nunique()
    curves['n_failed'] = total - curves['n_ok']
    if (curves['n_failed'] > 0).any():
        logger.warning(f"{int(curves['n_failed'].max())} failed replicate(s) excluded from aggregation")
    return curves[['method', 'alpha', 'fdr', 'fdr_se', 'power', 'power_se', 'fdr_ratio',
                   'discoveries', 'n_ok', 'n_failed']]


def power_difference(curves: pd.DataFrame, method_a: str, method_b: str) -> pd.DataFrame:
    """Mean power of method_a minus method_b at each alpha both were run at"""
    a = curves[curves['method'] == method_a].set_index('alpha')['power']
    b = curves[curves['method'] == method_b].set_index('alpha')['power']
    diff = (a - b).dropna()
    return pd.DataFrame({'alpha': diff.index.to_numpy(), 'difference': diff.to_numpy()})


def paired_power_differences(records: pd.DataFrame) -> pd.DataFrame:
    """Replicate-paired power differences with standard errors for every method pair"""
    ok = records[records['status'] == 'ok'].copy()
    ok['power'] = pd.to_numeric(ok['power'], errors='coerce')
    wide = ok.pivot_table(index=['replicate', 'alpha'], columns='method', values='power', dropna=False)
    rows = []
    for a, b in itertools.combinations(sorted(wide.columns), 2):
        diff = (wide[a] - wide[b]).dropna()
        if diff.empty:
            continue
        grouped = diff.groupby(level='alpha')
        stats = pd.DataFrame({'difference': grouped.mean(),
                              'se': (grouped.std() / np.sqrt(grouped.count())).fillna(0.0)})
        stats = stats.reset_index()
        stats.insert(0, 'method_b', b)
        stats.insert(0, 'method_a', a)
        rows.append(stats)
    if not rows:
        return pd.DataFrame(columns=['method_a', 'method_b', 'alpha', 'difference', 'se'])
    return pd.concat(rows, ignore_index=True)


def null_win_diagnostic(tables: Sequence[ScoreTable], null_masks: Sequence[np.ndarray], c: float,
                        rng: np.random.Generator, z: Optional[float] = None) -> pd.DataFrame:
    """
    Fraction of original wins among the top-i0 true nulls (by W), pooled over
    replicates, with a normal-approximation band around c. The band half-width
    is z binomial standard errors; z defaults to the 0.975 normal quantile.
    """
    if not tables or len(tables) != len(null_masks):
        raise ParameterError("need one null mask per score table")
    z = norm.ppf(0.975) if z is None else z
    cumulative = []
    for table, nulls in zip(tables, null_masks):
        d1 = table.d1
        i_c = int(round(c * d1))
        if abs(i_c - c * d1) > 1e-9 or not 1 <= i_c <= d1:
            raise ParameterError(f"c={c} is not a multiple of 1/{d1}")
        if i_c == d1:
            labels = label_ranks(table.ranks, d1, d1, d1)
            order = np.lexsort((rng.random(table.p), -table.original))
        else:
            outcome = compete(table, TuningParams(d1, i_c, i_c), rng)
            labels, order = outcome.labels, outcome.order
        null_order = order[np.asarray(nulls, dtype=bool)[order]]
        cumulative.append(np.cumsum(labels[null_order] == 1))

    depth = min(len(cum) for cum in cumulative)
    if depth == 0:
        raise ParameterError("no true nulls to diagnose")
    replicates = len(cumulative)
    totals = np.sum([cum[:depth] for cum in cumulative], axis=0)
    i0 = np.arange(1, depth + 1)
    half = z * np.sqrt(c * (1 - c) / (replicates * i0))
    return pd.DataFrame({'i0': i0, 'fraction': totals / (replicates * i0), 'expected': c,
                         'lower': c - half, 'upper': c + half})


def escapes_band(diagnostic: pd.DataFrame, side: str = 'upper') -> bool:
    above = (diagnostic['fraction'] > diagnostic['upper']).any()
    below = (diagnostic['fraction'] < diagnostic['lower']).any()
    if side == 'upper':
        return bool(above)
    if side == 'lower':
        return bool(below)
    return bool(above or below)


def _diagnostic_inputs(cfg: ExperimentConfig, d: int, replicate: int) -> Tuple[ScoreTable, np.ndarray]:
    data, truth = generate_dataset(cfg, np.random.default_rng([cfg.seed, replicate]))
    pipeline = KnockoffPipeline(data, [d], cfg.batches, cfg.partition, cfg.sigma_known,
                                cfg.scoring_options(), cfg.m_b, seed=(cfg.seed, replicate))
    return pipeline.scores(d), truth.null_mask


def run_null_win_diagnostic(cfg: ExperimentConfig, d: int, c: float, z: Optional[float] = None,
                            n_jobs: Optional[int] = None) -> pd.DataFrame:
    """Score cfg.replicates datasets at one d and run null_win_diagnostic on them"""
    results = Parallel(n_jobs=n_jobs or cfg.threads)(
        delayed(_diagnostic_inputs)(cfg, d, r) for r in range(cfg.replicates))
    tables, masks = zip(*results)
    return null_win_diagnostic(tables, masks, c, np.random.default_rng([cfg.seed, DIAGNOSTIC_KEY]), z)


def long_curves(curves: pd.DataFrame) -> pd.DataFrame:
    """Plot-ready rows: method, alpha, metric, value, se"""
    parts = []
    for metric, se in (('fdr', 'fdr_se'), ('power', 'power_se'), ('fdr_ratio', None)):
        part = curves[['method', 'alpha', metric]].rename(columns={metric: 'value'})
        part.insert(2, 'metric', metric)
        part['se'] = curves[se] if se else curves['fdr_se'] / curves['alpha']
        parts.append(part)
    return pd.concat(parts, ignore_index=True).sort_values(['metric', 'method', 'alpha'], kind='mergesort')


def _autosize_columns(writer):
    for sheet_name in writer.sheets:
        worksheet = writer.sheets[sheet_name]
        for column in worksheet.columns:
            max_length = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
            worksheet.column_dimensions[column[0].column_letter].width = min(max_length + 2, 50)


def export_to_excel(curves: pd.DataFrame, filename: str):
    """Workbook with power, power-difference and FDR-ratio sheets"""
    power = curves.pivot(index='alpha', columns='method', values='power')
    ratio = curves.pivot(index='alpha', columns='method', values='fdr_ratio')
    methods = sorted(curves['method'].unique())
    differences = pd.DataFrame(index=power.index)
    for a, b in itertools.combinations(methods, 2):
        differences[f"{a} - {b}"] = power[a] - power[b]

    with pd.ExcelWriter(filename, engine='openpyxl') as writer:
        power.reset_index().to_excel(writer, sheet_name='Power', index=False)
        differences.reset_index().to_excel(writer, sheet_name='Power difference', index=False)
        ratio.reset_index().to_excel(writer, sheet_name='FDR ratio', index=False)
        _autosize_columns(writer)
    logger.info(f"Curves exported to {filename}")


def plot_curves(curves: pd.DataFrame, out_dir: str) -> List[str]:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    written = []
    for metric, ylabel in (('power', 'Power'), ('fdr_ratio', 'Empirical FDR / alpha')):
        fig, ax = plt.subplots(figsize=(6, 4))
        for method, group in curves.groupby('method', sort=True):
            ax.plot(group['alpha'], group[metric], label=method)
        if metric == 'fdr_ratio':
            ax.axhline(1.0, color='grey', linestyle='--', linewidth=0.8)
        ax.set_xlabel('FDR threshold alpha')
        ax.set_ylabel(ylabel)
        ax.legend(fontsize='small')
        path = os.path.join(out_dir, f"{metric}.svg")
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
        written.append(path)
    return written


def report(curves: pd.DataFrame, out_dir: str, svg: bool = False, excel: bool = True) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, 'curves_long.csv')
    long_curves(curves).to_csv(path, index=False)
    written = [path]
    if excel:
        path = os.path.join(out_dir, 'curves.xlsx')
        export_to_excel(curves, path)
        written.append(path)
    if svg:
        written.extend(plot_curves(curves, out_dir))
    return written

#!/usr/bin/env python3
"""
Multiple-knockoff construction for fixed-design linear regression.

Builds d knockoff copies per feature either for all features at once
(single batch) or batch by batch, where each batch only carries the
knockoffs of its own features. Also provides the zero-row extension of
X and the matching noise extension of y for designs with n < (d+1)p.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.cluster import hierarchy

from errors import ConstructionError, DimensionError, EstimationError, ParameterError
from numerics import RANK_TOL, min_eigenvalue, sym_matrix, symmetric_root, thin_qr

logger = logging.getLogger(__name__)

PARTITION_METHODS = ('clustered', 'uniform', 'single')
MIN_MEAN_BATCH_SIZE = 4
UNIT_NORM_TOL = 1e-6


@dataclass
class DesignData:
    """Design matrix with unit-norm columns, response and extension bookkeeping"""
    x: np.ndarray
    y: np.ndarray
    n_original: int
    column_norms: np.ndarray
    sigma_hat: Optional[float] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.ndim != 2:
            raise DimensionError(f"design must be a matrix, got shape {self.x.shape}")
        n, p = self.x.shape
        if self.y.shape[0] != n:
            raise DimensionError(f"response has {self.y.shape[0]} rows, design has {n}")
        if n < p:
            raise DimensionError(f"need n >= p, got n={n}, p={p}")
        norms = np.linalg.norm(self.x, axis=0)
        if np.abs(norms - 1.0).max(initial=0.0) > UNIT_NORM_TOL:
            raise ParameterError("design columns must have unit Euclidean norm")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_arrays(cls, x, y=None) -> 'DesignData':
        """Normalize the columns of x and wrap it with y (zeros when absent)"""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise DimensionError(f"design must be a matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ParameterError("design has non-finite entries")
        norms = np.linalg.norm(x, axis=0)
        if np.any(norms == 0):
            raise ParameterError(f"design has all-zero columns: {np.flatnonzero(norms == 0).tolist()}")
        y = np.zeros(x.shape[0]) if y is None else np.asarray(y, dtype=float).ravel()
        return cls(x / norms, y, x.shape[0], norms)


def take_rows(data: DesignData, n_rows: int) -> DesignData:
    """Leading n_rows rows of an (extended) design"""
    if not data.n_original <= n_rows <= data.n:
        raise DimensionError(f"row prefix {n_rows} outside [{data.n_original}, {data.n}]")
    return replace(data, x=data.x[:n_rows], y=data.y[:n_rows])


def estimate_sigma(x: np.ndarray, y: np.ndarray) -> float:
    """Noise level from the residual sum of squares of the full least-squares fit"""
    n, p = x.shape
    if n <= p:
        raise EstimationError(f"cannot estimate sigma with n={n} <= p={p}")
    beta, _, _, _ = linalg.lstsq(x, y)
    rss = float(np.sum((y - x @ beta) ** 2))
    return float(np.sqrt(rss / (n - p)))


def extend_design(data: DesignData, d: int, sigma_known: Optional[float],
                  rng: np.random.Generator) -> DesignData:
    """Append zero rows to X and N(0, sigma^2) draws to y until n = (d+1)p"""
    target = (d + 1) * data.p
    if data.n >= target:
        raise ParameterError(f"no extension needed: n={data.n} >= (d+1)p={target}")
    if sigma_known is not None:
        if sigma_known <= 0:
            raise ParameterError(f"known sigma must be positive, got {sigma_known}")
        sigma = float(sigma_known)
    else:
        sigma = estimate_sigma(data.x, data.y)
    extra = target - data.n
    logger.info(f"Extending design from n={data.n} to n={target} (sigma={sigma:.4g})")
    x = np.vstack([data.x, np.zeros((extra, data.p))])
    y = np.concatenate([data.y, sigma * rng.standard_normal(extra)])
    return replace(data, x=x, y=y, sigma_hat=sigma)


@dataclass
class BatchPartition:
    batches: List[np.ndarray]
    method: str = 'single'

    def __post_init__(self):
        if self.method not in PARTITION_METHODS:
            raise ParameterError(f"unknown partition method '{self.method}'")
        self.batches = [np.sort(np.asarray(b, dtype=int)) for b in self.batches]
        if not self.batches or any(b.size == 0 for b in self.batches):
            raise ParameterError("every batch must hold at least one feature")
        joined = np.sort(np.concatenate(self.batches))
        if not np.array_equal(joined, np.arange(joined.size)):
            raise ParameterError("batches must be disjoint and cover every feature")

    @property
    def p(self) -> int:
        return int(sum(b.size for b in self.batches))

    @property
    def sizes(self) -> List[int]:
        return [int(b.size) for b in self.batches]

    @classmethod
    def single(cls, p: int) -> 'BatchPartition':
        return cls([np.arange(p)], 'single')

    def to_dict(self) -> Dict:
        return {'method': self.method, 'batches': [b.tolist() for b in self.batches]}


def _check_batch_sizes(partition: BatchPartition):
    n_batches = len(partition.batches)
    if n_batches > 1 and partition.p / n_batches < MIN_MEAN_BATCH_SIZE:
        logger.warning(f"mean batch size {partition.p / n_batches:.2f} is below "
                       f"{MIN_MEAN_BATCH_SIZE}; batched knockoffs may lose null exchangeability")


def _sorted_groups(labels: np.ndarray) -> List[np.ndarray]:
    groups = [np.flatnonzero(labels == lab) for lab in np.unique(labels)]
    return sorted(groups, key=lambda g: g[0])


def cluster_batches(x: np.ndarray, b: int) -> BatchPartition:
    """UPGMA tree over the columns of x, cut into exactly b clusters"""
    p = x.shape[1]
    if not 1 <= b <= p:
        raise ParameterError(f"number of batches must be in [1, {p}], got {b}")
    if b == 1:
        return BatchPartition([np.arange(p)], 'clustered')
    if b == p:
        partition = BatchPartition([np.array([i]) for i in range(p)], 'clustered')
    else:
        tree = hierarchy.linkage(np.asarray(x, dtype=float).T, method='average', metric='euclidean')
        labels = hierarchy.cut_tree(tree, n_clusters=b).ravel()
        partition = BatchPartition(_sorted_groups(labels), 'clustered')
    _check_batch_sizes(partition)
    return partition


def uniform_batches(p: int, b: int, rng: np.random.Generator) -> BatchPartition:
    """Random assignment of features to b batches of near-equal size"""
    if not 1 <= b <= p:
        raise ParameterError(f"number of batches must be in [1, {p}], got {b}")
    chunks = np.array_split(rng.permutation(p), b)
    partition = BatchPartition(sorted((np.sort(c) for c in chunks), key=lambda c: c[0]), 'uniform')
    _check_batch_sizes(partition)
    return partition


def make_partition(x: np.ndarray, b: int, method: str, rng: np.random.Generator) -> BatchPartition:
    p = x.shape[1]
    if method == 'single' or b == 1:
        if method == 'single' and b != 1:
            raise ParameterError(f"partition 'single' needs b=1, got {b}")
        return BatchPartition([np.arange(p)], method)
    if method == 'clustered':
        return cluster_batches(x, b)
    if method == 'uniform':
        return uniform_batches(p, b, rng)
    raise ParameterError(f"unknown partition method '{method}'")


def critical_s0_full(sigma, d: int) -> float:
    """Largest equicorrelated gap keeping the full (d+1)p Gram matrix PSD"""
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    return min((d + 1) / d * min_eigenvalue(sigma), 1.0)


def _check_s0(s0: float):
    if not 0 < s0 <= 1:
        raise ParameterError(f"s0 must lie in (0, 1], got {s0}")


def build_gram_full(sigma, d: int, s0: float) -> np.ndarray:
    sigma = sym_matrix(sigma)
    _check_s0(s0)
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    p = sigma.shape[0]
    sigma0 = sigma - s0 * np.eye(p)
    return np.kron(np.ones((d + 1, d + 1)), sigma0) + s0 * np.eye((d + 1) * p)


def _as_batch(batch, p: int) -> np.ndarray:
    idx = np.unique(np.asarray(batch, dtype=int))
    if idx.size == 0:
        raise ParameterError("batch must be non-empty")
    if idx[0] < 0 or idx[-1] >= p:
        raise ParameterError(f"batch indices must lie in [0, {p})")
    return idx


def build_gram_batch(sigma, batch, d: int, s0: float) -> np.ndarray:
    """
    Gram matrix of [X, X~^I] for the knockoffs of one batch I.

    Layout: the p originals first, then d copies of the batch in copy-major
    order. Originals keep Sigma, copy/original blocks use Sigma0 restricted
    to the batch columns, copies of the same batch use Sigma^II on the
    diagonal blocks and Sigma0^II elsewhere.
    """
    sigma = sym_matrix(sigma)
    _check_s0(s0)
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    p = sigma.shape[0]
    idx = _as_batch(batch, p)
    k = idx.size
    sigma0 = sigma - s0 * np.eye(p)
    cross = np.tile(sigma0[:, idx], (1, d))
    inner = np.kron(np.ones((d, d)), sigma0[np.ix_(idx, idx)]) + s0 * np.eye(d * k)
    gram = np.block([[sigma, cross], [cross.T, inner]])
    return (gram + gram.T) / 2.0


def _psd_slack(gram: np.ndarray) -> float:
    return 1e-12 * gram.shape[0]


def critical_s0_batch(sigma, batch, d: int, tol: float = 1e-10, max_iter: int = 60) -> float:
    """Bisection for the largest s0 in (0, 1] with G^I(s0) PSD"""
    sigma = sym_matrix(sigma)

    def feasible(s0: float) -> bool:
        gram = build_gram_batch(sigma, batch, d, s0)
        return min_eigenvalue(gram) >= -_psd_slack(gram)

    if feasible(1.0):
        return 1.0
    lo, hi = 1e-12, 1.0
    if not feasible(lo):
        raise ConstructionError("G^I is not PSD even for a vanishing s0; Sigma is degenerate")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = (lo + hi) / 2.0
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo * (1 - 1e-8)


@dataclass
class KnockoffSet:
    """
    d knockoff copies per feature.

    ``matrix`` is n x (d*p); column c*p + i holds copy c+1 of feature i.
    """
    d: int
    matrix: np.ndarray
    per_batch_s0: List[float]
    partition: BatchPartition
    extended_rows: int = 0
    sigma_hat: Optional[float] = None
    metadata: Dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.partition.p

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def columns(self) -> Dict[int, List[np.ndarray]]:
        return {i: [self.matrix[:, c * self.p + i] for c in range(self.d)] for i in range(self.p)}

    def copies(self, i: int) -> np.ndarray:
        return self.matrix[:, [c * self.p + i for c in range(self.d)]]

    def batch_block(self, j: int) -> np.ndarray:
        """Knockoffs of batch j in the column order of build_gram_batch"""
        idx = self.partition.batches[j]
        return np.hstack([self.matrix[:, c * self.p + idx] for c in range(self.d)])

    def augmented(self, x: np.ndarray, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        [X, X~^{I_j}] and its feature map.

        Row k of the map is (feature, copy) for column k, with copy 0 for the
        original; originals outside the batch map to (-1, -1).
        """
        idx = self.partition.batches[j]
        feature_map = np.full((self.p + self.d * idx.size, 2), -1, dtype=int)
        feature_map[idx, 0] = idx
        feature_map[idx, 1] = 0
        for c in range(self.d):
            rows = slice(self.p + c * idx.size, self.p + (c + 1) * idx.size)
            feature_map[rows, 0] = idx
            feature_map[rows, 1] = c + 1
        return np.hstack([x, self.batch_block(j)]), feature_map

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()


def construct_knockoffs(data: DesignData, d: int, partition: BatchPartition,
                        rng: np.random.Generator) -> KnockoffSet:
    """
    Build the knockoff columns batch by batch.

    A single QR of [X A] (A Gaussian) supplies a shared orthonormal basis Q_b;
    batch j maps its Gram root through the first p columns of Q_b plus its
    own contiguous slice of the trailing d*p columns, so knockoff-specific
    subspaces of different batches are orthogonal.
    """
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    x = data.x
    n, p = x.shape
    if n < (d + 1) * p:
        raise DimensionError(f"need n >= (d+1)p = {(d + 1) * p}, got n={n}; extend the design first")
    if partition.p != p:
        raise DimensionError(f"partition covers {partition.p} features, design has {p}")

    sigma = sym_matrix(x.T @ x)
    extension = rng.standard_normal((n, d * p))
    basis = thin_qr(np.hstack([x, extension]), rng=rng)
    qb, rb = basis.q, basis.r

    knock = np.zeros((n, d * p))
    s0_list = []
    offset = p
    n_batches = len(partition.batches)
    for j, idx in enumerate(partition.batches):
        logger.debug(f"Constructing batch {j + 1}/{n_batches} ({idx.size} features)")
        width = d * idx.size
        if n_batches == 1:
            s0 = critical_s0_full(sigma, d)
        else:
            s0 = critical_s0_batch(sigma, idx, d)
        if s0 <= RANK_TOL:
            raise ConstructionError(f"batch {j}: Sigma is singular, no positive s0 exists")
        gram = build_gram_batch(sigma, idx, d, s0)
        root = symmetric_root(gram)
        q0r0 = thin_qr(root, rng=rng, warn=False)
        r0 = q0r0.r

        q_batch = np.hstack([qb[:, :p], qb[:, offset:offset + width]])
        lead_r0 = np.sign(np.diag(r0)[:p])
        lead_r = np.sign(np.diag(rb)[:p])
        flips = (lead_r0 != lead_r) & (lead_r0 != 0) & (lead_r != 0)
        q_batch[:, :p][:, flips] *= -1.0

        x1 = q_batch @ r0
        mismatch = float(np.abs(x1[:, :p] - x).max())
        if mismatch > 1e-6:
            raise ConstructionError(f"batch {j}: sign alignment failed, max column discrepancy {mismatch:.3e}")
        for c in range(d):
            knock[:, c * p + idx] = x1[:, p + c * idx.size:p + (c + 1) * idx.size]
        s0_list.append(float(s0))
        offset += width

    logger.info(f"Constructed d={d} knockoffs for p={p} features in {n_batches} batch(es); "
                f"min s0={min(s0_list):.4f}")
    return KnockoffSet(d=d, matrix=knock, per_batch_s0=s0_list, partition=partition,
                       extended_rows=n - data.n_original, sigma_hat=data.sigma_hat)


@dataclass
class GramReport:
    deviations: List[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(dev <= self.tol for dev in self.deviations)

    @property
    def max_deviation(self) -> float:
        return max(self.deviations) if self.deviations else 0.0


def verify_gram(data: DesignData, ks: KnockoffSet, tol: float = 1e-6) -> GramReport:
    """Max deviation of each batch's empirical Gram from its target G^I"""
    x = data.x
    if x.shape[0] < ks.n_rows:
        x = np.vstack([x, np.zeros((ks.n_rows - x.shape[0], x.shape[1]))])
    elif x.shape[0] > ks.n_rows:
        raise DimensionError(f"design has {x.shape[0]} rows, knockoffs have {ks.n_rows}")
    sigma = sym_matrix(x.T @ x)
    deviations = []
    for j, idx in enumerate(ks.partition.batches):
        aug, _ = ks.augmented(x, j)
        target = build_gram_batch(sigma, idx, ks.d, ks.per_batch_s0[j])
        deviations.append(float(np.abs(aug.T @ aug - target).max()))
    return GramReport(deviations, tol)

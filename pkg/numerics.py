#!/usr/bin/env python3
"""
Dense linear-algebra kernels used by the knockoff construction:
symmetric eigendecomposition, symmetric root, sign-normalized thin QR
and minimum-eigenvalue queries.

All functions are pure; inputs are never modified.
"""

import logging
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy import linalg

from errors import DimensionError, NotPSDError, ParameterError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
RANK_TOL = 1e-10


class QRFactors(NamedTuple):
    q: np.ndarray
    r: np.ndarray


def sym_matrix(m) -> np.ndarray:
    """Validate a square finite matrix and return its exactly symmetric copy"""
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError("matrix has non-finite entries")
    scale = max(np.abs(a).max(), 1.0)
    asym = np.abs(a - a.T).max()
    if asym > SYMMETRY_TOL * scale:
        raise ParameterError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return (a + a.T) / 2.0


def sym_eigen(m) -> Tuple[np.ndarray, np.ndarray]:
    """
    Spectral decomposition m = V diag(w) V^T.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = sym_matrix(m)
    w, v = linalg.eigh(a)
    return w[::-1].copy(), v[:, ::-1].copy()


def min_eigenvalue(m) -> float:
    a = sym_matrix(m)
    return float(linalg.eigvalsh(a)[0])


def symmetric_root(m, clip_tol: Optional[float] = None) -> np.ndarray:
    """
    Symmetric PSD root X0 with X0 @ X0 == m.

    Eigenvalues in [-clip_tol, 0) are treated as zero. The default slack is
    1e-8 times the largest eigenvalue, enough for matrices built exactly at
    the rank-deficient critical s0.
    """
    w, v = sym_eigen(m)
    if clip_tol is None:
        clip_tol = 1e-8 * max(abs(w[0]), np.finfo(float).tiny)
    if w[-1] < -clip_tol:
        raise NotPSDError(float(w[-1]), clip_tol)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return (root + root.T) / 2.0


def thin_qr(m, rng: Optional[np.random.Generator] = None, warn: bool = True) -> QRFactors:
    """
    Thin QR factorization with a non-negative diagonal of r.

    Rank-deficient inputs are handled by completing q with random directions
    orthogonalized against the other columns, so q keeps orthonormal columns
    and q @ r still reproduces m.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    n, k = a.shape
    if n < k:
        raise DimensionError(f"thin QR needs n >= k, got {n} x {k}")

    q, r = linalg.qr(a, mode='economic')
    diag = np.abs(np.diag(r))
    scale = diag.max() if diag.size else 0.0
    deficient = diag <= RANK_TOL * max(scale, np.finfo(float).tiny)
    if deficient.any():
        if warn:
            logger.warning(f"rank-deficient QR input: {int(deficient.sum())} of {k} columns "
                           "completed with random orthogonal directions")
        q, r = _gram_schmidt_completion(a, deficient, rng or np.random.default_rng(0))
    return _normalize_signs(q, r)


def _normalize_signs(q: np.ndarray, r: np.ndarray) -> QRFactors:
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return QRFactors(q * signs, r * signs[:, None])


def _gram_schmidt_completion(a: np.ndarray, deficient: np.ndarray,
                             rng: np.random.Generator) -> QRFactors:
    n, k = a.shape
    q = np.zeros((n, k))
    r = np.zeros((k, k))
    for j in range(k):
        basis = q[:, :j]
        v = a[:, j].copy()
        coef = basis.T @ v
        v -= basis @ coef
        # second pass restores orthogonality lost to cancellation
        extra = basis.T @ v
        v -= basis @ extra
        r[:j, j] = coef + extra
        norm = np.linalg.norm(v)
        if deficient[j] or norm <= RANK_TOL * max(np.linalg.norm(a[:, j]), 1.0):
            r[j, j] = 0.0
            q[:, j] = _random_orthogonal_direction(basis, rng)
        else:
            r[j, j] = norm
            q[:, j] = v / norm
    return QRFactors(q, r)


def _random_orthogonal_direction(basis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = basis.shape[0]
    for _ in range(10):
        v = rng.standard_normal(n)
        for _ in range(2):
            v -= basis @ (basis.T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm
    raise DimensionError("could not find a direction orthogonal to the current basis")

#!/usr/bin/env python3
"""
Tests for the dense linear-algebra kernels
"""

import logging

import numpy as np
import pytest

from errors import DimensionError, NotPSDError, NumericalError, ParameterError
from numerics import min_eigenvalue, sym_eigen, sym_matrix, symmetric_root, thin_qr


def test_sym_eigen_diagonal():
    w, v = sym_eigen(np.diag([1.0, 4.0]))
    np.testing.assert_allclose(w, [4.0, 1.0])
    np.testing.assert_allclose(np.abs(v), [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)


def test_sym_eigen_reconstructs():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((6, 6))
    m = b + b.T
    w, v = sym_eigen(m)
    assert np.all(np.diff(w) <= 0)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, m, atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(6), atol=1e-10)


def test_sym_matrix_validation():
    with pytest.raises(DimensionError):
        sym_matrix(np.ones((2, 3)))
    with pytest.raises(ParameterError):
        sym_matrix(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ParameterError):
        sym_matrix(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_symmetric_root_squares_back():
    rng = np.random.default_rng(1)
    b = rng.standard_normal((8, 5))
    m = b @ b.T  # rank 5, PSD
    root = symmetric_root(m)
    np.testing.assert_allclose(root, root.T, atol=1e-12)
    np.testing.assert_allclose(root @ root, m, atol=1e-8)
    assert min_eigenvalue(root) >= -1e-10


def test_symmetric_root_rejects_indefinite():
    with pytest.raises(NotPSDError) as info:
        symmetric_root(np.diag([1.0, -1.0]))
    assert info.value.eigenvalue == pytest.approx(-1.0)
    assert isinstance(info.value, NumericalError)
    assert info.value.exit_code == 4


def test_thin_qr_full_rank():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((10, 4))
    q, r = thin_qr(m)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(q @ r, m, atol=1e-12)
    np.testing.assert_allclose(np.tril(r, -1), 0.0)
    assert np.all(np.diag(r) >= 0)


def test_thin_qr_rank_deficient_warns(caplog):
    rng = np.random.default_rng(3)
    a = rng.standard_normal(12)
    b = rng.standard_normal(12)
    m = np.column_stack([a, a, b])
    with caplog.at_level(logging.WARNING):
        q, r = thin_qr(m, rng=np.random.default_rng(0))
    assert 'rank-deficient' in caplog.text
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(q @ r, m, atol=1e-10)
    assert np.all(np.diag(r) >= 0)


def test_thin_qr_needs_tall_input():
    with pytest.raises(DimensionError):
        thin_qr(np.ones((2, 3)))


def test_min_eigenvalue():
    assert min_eigenvalue(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(1.0)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eigenscore.errors import (
    DimMismatchError,
    NonFiniteError,
    NotSquareError,
    RankDeficientError,
)
from eigenscore.linalg import qr_orthonormalize, sym_eig


def test_qr_single_column_oracle():
    q, r = qr_orthonormalize(np.array([[3.0], [4.0]]))
    assert np.allclose(q, [[0.6], [0.8]])
    assert np.allclose(r, [[5.0]])


def test_qr_reconstructs_and_r_diag_nonnegative():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 3))
    q, r = qr_orthonormalize(a)
    assert np.allclose(q @ r, a, atol=1e-12)
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)
    assert np.all(np.diagonal(r) >= 0.0)


def test_qr_sign_convention_deterministic():
    # negating the input's columns must not change Q beyond column signs
    a = np.array([[-2.0, 0.0], [0.0, 3.0]])
    q, r = qr_orthonormalize(a)
    assert np.allclose(q, [[-1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(r, [[2.0, 0.0], [0.0, 3.0]])


def test_qr_rank_deficient_raises():
    a = np.ones((4, 2))
    with pytest.raises(RankDeficientError):
        qr_orthonormalize(a)


def test_qr_near_dependent_raises():
    a = np.array([[1.0, 1.0], [0.0, 1e-12], [0.0, 0.0]])
    with pytest.raises(RankDeficientError):
        qr_orthonormalize(a)


def test_qr_wide_matrix_rejected():
    with pytest.raises(DimMismatchError):
        qr_orthonormalize(np.ones((2, 3)))


def test_qr_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        qr_orthonormalize(np.array([[np.nan], [1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_qr_idempotent_on_orthonormal_input(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((5, 3)) + 0.1 * np.eye(5, 3)
    q, _ = qr_orthonormalize(a)
    q2, r2 = qr_orthonormalize(q)
    assert np.allclose(q2, q, atol=1e-12)
    assert np.allclose(r2, np.eye(3), atol=1e-12)


def test_sym_eig_oracle_2x2():
    vals, vecs = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(vals, [3.0, 1.0])
    s = 1.0 / np.sqrt(2.0)
    assert np.allclose(vecs[:, 0], [s, s])
    assert np.allclose(vecs[:, 1], [s, -s])  # first significant entry positive


def test_sym_eig_descending_and_orthonormal():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((7, 7))
    a = a + a.T
    vals, vecs = sym_eig(a)
    assert np.all(np.diff(vals) <= 1e-12)
    assert np.allclose(vecs.T @ vecs, np.eye(7), atol=1e-12)
    assert np.allclose(a @ vecs, vecs * vals, atol=1e-10)


def test_sym_eig_symmetrizes_input():
    skew = np.array([[1.0, 2.0], [0.0, 1.0]])
    vals, _ = sym_eig(skew)
    ref, _ = sym_eig(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.allclose(vals, ref)


def test_sym_eig_rejects_non_square():
    with pytest.raises(NotSquareError):
        sym_eig(np.ones((2, 3)))


def test_sym_eig_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        sym_eig(np.array([[np.inf, 0.0], [0.0, 1.0]]))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from pipebridge.algebra import (
    as_mass_vector,
    as_support_matrix,
    elementwise,
    kl_divergence,
    row_sums,
    scale_cols,
    scale_rows,
)
from pipebridge.errors import (
    DivideByZero,
    LogOfNonPositive,
    ShapeMismatch,
    SupportViolation,
)

mass_vectors = st.lists(
    st.floats(min_value=0.0, max_value=50.0, allow_nan=False), min_size=1, max_size=8
)


def test_kl_identity_is_zero():
    assert kl_divergence([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0


def test_kl_zero_against_positive():
    # 0 log 0 - 0 + 1  +  1 log 1 - 1 + 1 = 1
    assert kl_divergence([0.0, 1.0], [1.0, 1.0]) == pytest.approx(1.0, abs=1e-15)


def test_kl_hand_value():
    # 2 log 2 - 2 + 1 + 0 - 0 + 1 = 2 log 2, evaluated by scalar arithmetic
    assert kl_divergence([2.0, 0.0], [1.0, 1.0]) == pytest.approx(2 * math.log(2), abs=1e-14)


def test_kl_support_violation():
    with pytest.raises(SupportViolation):
        kl_divergence([1.0, 1.0], [1.0, 0.0])


def test_kl_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        kl_divergence([1.0, 1.0], [1.0, 1.0, 1.0])


def test_kl_sparse_matches_dense():
    rng = np.random.default_rng(7)
    p = rng.uniform(0.0, 2.0, size=(5, 5))
    q = p + rng.uniform(0.1, 1.0, size=(5, 5))
    dense = kl_divergence(p, q)
    sp = kl_divergence(sparse.csr_array(p), sparse.csr_array(q))
    assert sp == pytest.approx(dense, rel=1e-12)


def test_kl_sparse_support_violation():
    p = sparse.csr_array(np.array([[1.0, 1.0], [0.0, 0.0]]))
    q = sparse.csr_array(np.array([[1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(SupportViolation):
        kl_divergence(p, q)


@given(mass_vectors, mass_vectors)
@settings(max_examples=200, deadline=None)
def test_kl_nonnegative_and_identity(p, q):
    n = min(len(p), len(q))
    p = np.asarray(p[:n])
    q = np.asarray(q[:n]) + 1e-3  # strictly positive reference
    d = kl_divergence(p, q)
    assert d >= -1e-12
    if d <= 1e-12:
        assert np.allclose(p, q, atol=1e-5)
    assert kl_divergence(q, q) == 0.0


@given(
    st.integers(min_value=1, max_value=6),
    st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=150, deadline=None)
def test_kl_joint_convexity(n, theta, seed):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.uniform(0, 3, n), rng.uniform(0, 3, n)
    q1, q2 = rng.uniform(0.1, 3, n), rng.uniform(0.1, 3, n)
    lhs = kl_divergence(theta * p1 + (1 - theta) * p2, theta * q1 + (1 - theta) * q2)
    rhs = theta * kl_divergence(p1, q1) + (1 - theta) * kl_divergence(p2, q2)
    assert lhs <= rhs + 1e-10


def test_row_sums_examples():
    assert np.array_equal(row_sums(sparse.csr_array(np.array([[1.0, 1.0], [0.0, 0.0]]))), [2.0, 0.0])
    assert np.array_equal(row_sums(sparse.identity(2, format="csr")), [1.0, 1.0])
    a = sparse.csr_array(np.array([[0.5, 0.5], [0.0, 1.0]]))
    assert np.array_equal(row_sums(a), [1.0, 1.0])


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_row_sums_of_transpose_are_column_sums(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0, 1, size=(4, 4)) * (rng.uniform(0, 1, size=(4, 4)) > 0.4)
    ms = sparse.csr_array(m)
    brute = np.array([m[:, j].sum() for j in range(4)])
    assert np.allclose(row_sums(ms.T.tocsr()), brute, atol=1e-14)


def test_elementwise_examples():
    assert np.array_equal(elementwise("mul", np.array([1.0, 2.0]), np.array([3.0, 4.0])), [3.0, 8.0])
    assert np.array_equal(elementwise("div", np.array([2.0, 4.0]), np.array([2.0, 2.0])), [1.0, 2.0])
    assert np.array_equal(elementwise("exp", np.array([0.0, 0.0])), [1.0, 1.0])


def test_elementwise_div_zero_on_support():
    with pytest.raises(DivideByZero):
        elementwise("div", np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    # zero dividend tolerates a zero divisor
    out = elementwise("div", np.array([0.0, 1.0]), np.array([0.0, 2.0]))
    assert np.array_equal(out, [0.0, 0.5])


def test_elementwise_log_errors():
    with pytest.raises(LogOfNonPositive):
        elementwise("log", np.array([1.0, 0.0]))
    assert np.allclose(elementwise("log", np.array([1.0, math.e])), [0.0, 1.0])


def test_elementwise_sparse_support_semantics():
    a = sparse.csr_array(np.array([[2.0, 0.0], [0.0, 3.0]]))
    b = sparse.csr_array(np.array([[2.0, 5.0], [0.0, 3.0]]))
    prod = elementwise("mul", a, b).toarray()
    assert np.array_equal(prod, [[4.0, 0.0], [0.0, 9.0]])
    quot = elementwise("div", a, b).toarray()
    assert np.array_equal(quot, [[1.0, 0.0], [0.0, 1.0]])
    ex = elementwise("exp", a).toarray()
    # restricted to the stored support: absent entries stay absent
    assert np.array_equal(ex, [[math.exp(2.0), 0.0], [0.0, math.exp(3.0)]])


def test_as_mass_vector_validation():
    with pytest.raises(ValueError):
        as_mass_vector([-1.0, 0.0])
    with pytest.raises(ShapeMismatch):
        as_mass_vector([[1.0]])
    with pytest.raises(ShapeMismatch):
        as_mass_vector([1.0], n=2)


def test_as_support_matrix_eliminates_stored_zeros():
    m = sparse.csr_array(np.array([[0.0, 1.0], [0.0, 0.0]]))
    m.data = np.array([0.0])  # force a stored zero
    cleaned = as_support_matrix(sparse.csr_array(np.array([[0.0, 1.0], [2.0, 0.0]])))
    assert cleaned.nnz == 2
    with pytest.raises(ValueError):
        as_support_matrix(np.array([[1.0, -2.0], [0.0, 1.0]]))


def test_scaling_helpers():
    m = sparse.csr_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(scale_rows(m, np.array([2.0, 0.0])).toarray(), [[2.0, 4.0], [0.0, 0.0]])
    assert np.array_equal(scale_cols(m, np.array([0.0, 1.0])).toarray(), [[0.0, 2.0], [0.0, 4.0]])
    assert scale_rows(m, np.array([2.0, 0.0])).nnz == 2  # dropped from support

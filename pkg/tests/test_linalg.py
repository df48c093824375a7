import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnlab.linalg import (INF, ConjugatePair, NotPositiveDefiniteError, NotSymmetricError,
                            PowerIterationError, column_norms, norm_index, norm_rs, op_norm,
                            spd_solve, spectral_norm, vec_norm)
from oracles import gauss_inverse, largest_singular_value

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_spd_solve_identity():
    np.testing.assert_array_equal(spd_solve(np.eye(2), np.eye(2)), np.eye(2))


def test_spd_solve_diagonal():
    out = spd_solve(np.array([[2.0, 0.0], [0.0, 2.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_allclose(out, [[0.5], [0.5]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_spd_solve_matches_elimination_oracle(seed):
    g = np.random.default_rng(seed)
    M = g.standard_normal((5, 5))
    A = M @ M.T + 0.5 * np.eye(5)
    B = g.standard_normal((5, 3))
    ref = np.array(gauss_inverse(A.tolist())) @ B
    np.testing.assert_allclose(spd_solve(A, B), ref, rtol=0, atol=1e-9)


def test_spd_solve_ridge_shifts_diagonal():
    g = np.random.default_rng(3)
    M = g.standard_normal((4, 2))
    A = M @ M.T  # rank 2, singular without the ridge
    b = g.standard_normal(4)
    x = spd_solve(A, b, ridge=0.3)
    np.testing.assert_allclose((A + 0.3 * np.eye(4)) @ x, b, atol=1e-12)


def test_spd_solve_errors():
    with pytest.raises(NotSymmetricError):
        spd_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(NotPositiveDefiniteError):
        spd_solve(np.array([[1.0, 0.0], [0.0, -1.0]]), np.ones(2))
    with pytest.raises(ValueError):
        spd_solve(np.eye(2), np.ones(3))
    with pytest.raises(ValueError):
        spd_solve(np.eye(2), np.ones(2), ridge=-1.0)
    with pytest.raises(ValueError):
        spd_solve(np.array([[np.nan, 0.0], [0.0, 1.0]]), np.ones(2))


def test_norm_rs_examples():
    assert norm_rs(np.eye(2), (2, 2)) == pytest.approx(math.sqrt(2), abs=1e-15)
    assert norm_rs(np.array([[1.0, -2.0], [0.0, 3.0]]), (2, INF)) == pytest.approx(math.sqrt(13), abs=1e-15)
    assert norm_rs(np.zeros((3, 2)), ConjugatePair(1, INF)) == 0.0


def test_norm_rs_is_frobenius_for_22():
    g = np.random.default_rng(0)
    M = g.standard_normal((4, 6))
    assert norm_rs(M, ConjugatePair()) == pytest.approx(np.linalg.norm(M), rel=1e-14)


@given(arrays(np.float64, (3, 4), elements=finite), st.sampled_from([1, 2, INF]))
def test_norm_rs_column_loop(M, r):
    pair = ConjugatePair.from_r(r)
    cols = []
    for j in range(M.shape[1]):
        col = M[:, j]
        cols.append({1: sum(abs(col)), 2: math.sqrt(sum(col * col)), INF: max(abs(col))}[r])
    s = pair.s
    ref = {1: sum(cols), 2: math.sqrt(sum(c * c for c in cols)), INF: max(cols)}[s]
    assert norm_rs(M, pair) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_op_norm_examples():
    for r in (1, 2, INF):
        assert op_norm(np.eye(3), r) == pytest.approx(1.0, abs=1e-15)
    assert op_norm(np.diag([3.0, -5.0]), 2) == pytest.approx(5.0, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_matches_charpoly_oracle(seed):
    M = np.random.default_rng(seed).standard_normal((4, 4))
    ref = largest_singular_value(M.tolist())
    assert abs(op_norm(M, 2) - ref) <= 1e-6 * ref


def test_spectral_norm_frozen_value():
    # Frozen value, confirmed by the characteristic-polynomial oracle.
    M = np.random.default_rng(0).standard_normal((4, 4))
    assert spectral_norm(M, tol=1e-12) == pytest.approx(3.034873448881173, rel=1e-12)


def test_op_norm_one_and_inf_sums():
    M = np.array([[1.0, -2.0], [3.0, 0.5]])
    assert op_norm(M, 1) == 4.0
    assert op_norm(M, INF) == 3.5


@given(arrays(np.float64, (3, 5), elements=finite))
def test_spectral_norm_against_svd(M):
    ref = np.linalg.svd(M, compute_uv=False)[0] if np.any(M) else 0.0
    assert spectral_norm(M, tol=1e-10) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_spectral_norm_zero_and_nonconvergence():
    assert spectral_norm(np.zeros((2, 3))) == 0.0
    # Equal top singular values with a rotation: residual cannot shrink in 2 steps.
    M = np.array([[1.0, 0.0], [0.0, 0.999999]])
    with pytest.raises(PowerIterationError) as exc:
        spectral_norm(M, tol=1e-15, max_iter=2)
    assert "estimate" in exc.value.diagnostics


def test_conjugate_pairs():
    assert ConjugatePair.from_r("inf") == ConjugatePair(INF, 1)
    assert ConjugatePair.from_r(1).s == INF
    assert ConjugatePair().label() == "(2,2)"
    with pytest.raises(ValueError):
        ConjugatePair(2, 1)
    with pytest.raises(ValueError):
        norm_index(3)


def test_vector_and_column_norms():
    v = np.array([3.0, -4.0])
    assert (vec_norm(v, 1), vec_norm(v, 2), vec_norm(v, INF)) == (7.0, 5.0, 4.0)
    np.testing.assert_array_equal(column_norms(np.array([[3.0, 1.0], [4.0, -1.0]]), 1), [7.0, 2.0])

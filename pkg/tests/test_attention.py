import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnlab.attention import (CME, SM, AttentionHeadParams, MultiheadParams, attn_cme, attn_seq, attn_sm,
                               mha, mha_concat, mha_query, norm_softmax, singlehead_linear_limit)
from attnlab.kernels import KernelSpec, cross, sphere_sample
from attnlab.latent import GPModelSpec, gp_posterior
from oracles import softmax_attention_loop


def test_norm_softmax_examples():
    np.testing.assert_allclose(norm_softmax([1.0, 1.0, 1.0]), [1 / 3] * 3, rtol=1e-15)
    np.testing.assert_allclose(norm_softmax([2.0, 0.5]), [0.8, 0.2], rtol=1e-15)
    with pytest.raises(ValueError):
        norm_softmax([1.0, 0.0])


@given(arrays(np.float64, 6, elements=st.floats(1e-3, 1e3)))
def test_norm_softmax_sums_to_one(s):
    assert math.isclose(norm_softmax(s).sum(), 1.0, rel_tol=1e-14)


def test_attn_sm_single_token():
    v = np.array([1.5, -2.0, 0.25])
    out = attn_sm([0.3, -0.1], [[2.0, 1.0]], [v], KernelSpec.exponential(1.0))
    np.testing.assert_array_equal(out, v)


def test_attn_sm_duplicate_keys_average_values():
    K = np.array([[0.5, 0.5], [0.5, 0.5]])
    V = np.array([[1.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(attn_sm([1.0, -2.0], K, V, KernelSpec.rbf(2)), [0.5, 1.5], rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_attn_sm_matches_loop(seed):
    g = np.random.default_rng(seed)
    q, K, V = g.standard_normal(3), g.standard_normal((7, 3)), g.standard_normal((7, 2))
    ref = softmax_attention_loop(q.tolist(), K.tolist(), V.tolist(), 1.0)
    np.testing.assert_allclose(attn_sm(q, K, V, KernelSpec.exponential(1.0)), ref, rtol=1e-12, atol=1e-14)


def test_attn_cme_single_token_rbf():
    k, v, q = np.array([0.2, -0.4]), np.array([3.0, 1.0]), np.array([1.0, 0.5])
    spec = KernelSpec.rbf(2)
    expected = v * cross(spec, [k], q)[0] / (1.0 + 0.7)
    np.testing.assert_allclose(attn_cme(q, [k], [v], spec, 0.7), expected, rtol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_attn_cme_euclidean_primal_form(seed):
    g = np.random.default_rng(seed)
    K, V, q = g.standard_normal((9, 3)), g.standard_normal((9, 2)), g.standard_normal(3)
    lam = 0.4
    primal = V.T @ K @ np.linalg.solve(K.T @ K + lam * np.eye(3), q)
    np.testing.assert_allclose(attn_cme(q, K, V, KernelSpec.euclidean(), lam), primal, atol=1e-9)


def test_attn_cme_large_ridge_limit():
    g = np.random.default_rng(7)
    K, V, q = g.standard_normal((5, 2)), g.standard_normal((5, 3)), g.standard_normal(2)
    spec = KernelSpec.rbf(2)
    lam = 1e8
    lead = V.T @ cross(spec, K, q)
    np.testing.assert_allclose(lam * attn_cme(q, K, V, spec, lam), lead, rtol=1e-6)


def test_attn_cme_equals_gp_mean():
    g = np.random.default_rng(8)
    K, V, q = g.standard_normal((6, 2)), g.standard_normal((6, 1)), g.standard_normal(2)
    spec = KernelSpec.rbf(2)
    mean, _ = gp_posterior(GPModelSpec(spec, 0.3), K, V, q)
    np.testing.assert_allclose(attn_cme(q, K, V, spec, 0.3), mean, rtol=0, atol=1e-12)


def test_attn_errors():
    with pytest.raises(ValueError):
        attn_cme([1.0], [[1.0]], [[1.0]], KernelSpec.euclidean(), 0.0)
    with pytest.raises(ValueError):
        attn_sm([1.0, 2.0], [[1.0, 0.0]], [[1.0], [2.0]], KernelSpec.exponential())
    with pytest.raises(ValueError):
        attn_seq(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 1)), KernelSpec.rbf(2), mode="other")


def test_attn_seq_single_token_and_rows():
    V = np.array([[4.0, 5.0]])
    np.testing.assert_array_equal(attn_seq([[1.0]], [[1.0]], V, KernelSpec.exponential()), V)
    g = np.random.default_rng(9)
    Q, K, V = g.standard_normal((4, 3)), g.standard_normal((6, 3)), g.standard_normal((6, 2))
    spec = KernelSpec.rbf(3)
    for mode, lam in ((SM, None), (CME, 0.5)):
        out = attn_seq(Q, K, V, spec, mode, lam)
        for l in range(4):
            single = attn_sm(Q[l], K, V, spec) if mode == SM else attn_cme(Q[l], K, V, spec, lam)
            np.testing.assert_allclose(out[l], single, rtol=1e-14, atol=1e-14)
        perm = g.permutation(4)
        np.testing.assert_allclose(attn_seq(Q[perm], K, V, spec, mode, lam), out[perm], rtol=1e-14, atol=1e-14)


def _random_heads(g, d, d_p, h):
    return MultiheadParams([AttentionHeadParams(g.standard_normal((d, d_p)), g.standard_normal((d, d_p)),
                                                g.standard_normal((d, d))) for _ in range(h)])


def test_mha_identity_single_token():
    X = np.array([[0.3, -1.2]])
    params = MultiheadParams([AttentionHeadParams(np.eye(2), np.eye(2), np.eye(2))])
    np.testing.assert_array_equal(mha(X, params, KernelSpec.exponential()), X)


@pytest.mark.parametrize("mode,lam", [(SM, None), (CME, 0.3)])
def test_mha_summation_equals_concatenation(mode, lam):
    g = np.random.default_rng(10)
    d, d_p, h = 6, 3, 2
    Wq = [g.standard_normal((d, d_p)) for _ in range(h)]
    Wk = [g.standard_normal((d, d_p)) for _ in range(h)]
    Wt = [g.standard_normal((d, d_p)) for _ in range(h)]
    Wo = [g.standard_normal((d_p, d)) for _ in range(h)]
    params = MultiheadParams.from_concat(Wq, Wk, Wt, Wo)
    X = g.standard_normal((5, d))
    spec = KernelSpec.rbf(d_p)
    np.testing.assert_allclose(mha(X, params, spec, mode, lam), mha_concat(X, params, spec, mode, lam),
                               rtol=1e-12, atol=1e-12)


def test_mha_token_equivariance():
    g = np.random.default_rng(11)
    params = _random_heads(g, 4, 2, 2)
    X = g.standard_normal((7, 4))
    perm = g.permutation(7)
    spec = KernelSpec.rbf(2)
    np.testing.assert_allclose(mha(X[perm], params, spec), mha(X, params, spec)[perm], rtol=1e-13, atol=1e-13)


def test_mha_dimension_checks():
    g = np.random.default_rng(12)
    params = _random_heads(g, 4, 3, 2)
    with pytest.raises(ValueError):
        mha(g.standard_normal((3, 4)), params, KernelSpec.rbf(3))
    mha(g.standard_normal((3, 4)), params, KernelSpec.rbf(3), strict_dims=False)
    with pytest.raises(ValueError):
        AttentionHeadParams(np.ones((2, 1)), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        MultiheadParams([AttentionHeadParams(np.ones((2, 1)), np.ones((2, 1)), np.eye(2))],
                        concat=[(np.ones((2, 1)), np.zeros((1, 2)))])


def test_mha_query_matches_sequence_row():
    g = np.random.default_rng(13)
    params = _random_heads(g, 4, 2, 2)
    X = g.standard_normal((5, 4))
    spec = KernelSpec.exponential()
    np.testing.assert_allclose(mha_query(X[2], X, params, spec), mha(X, params, spec)[2], rtol=1e-13)


def test_singlehead_linear_limit_examples():
    q = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(singlehead_linear_limit(np.eye(3), np.eye(3), q), q)
    np.testing.assert_allclose(singlehead_linear_limit(2 * np.eye(3), np.eye(3), q), q / 2)
    with pytest.raises(np.linalg.LinAlgError):
        singlehead_linear_limit(np.diag([1.0, 1e-14, 1.0]), np.eye(3), q)


def test_singlehead_limit_approached_by_cme_attention():
    d = 3
    g = np.random.default_rng(14)
    W_k = np.eye(d) + 0.2 * g.standard_normal((d, d))
    W_v = g.standard_normal((d, d))
    x_q = sphere_sample(d, 1, 1)[0]
    params = MultiheadParams([AttentionHeadParams(W_k, W_k, W_v)])
    oracle = singlehead_linear_limit(W_k, W_v, W_k.T @ x_q)
    dist = []
    for L in (64, 4096):
        X = sphere_sample(d, L, L)
        out = mha_query(x_q, X, params, KernelSpec.euclidean(), CME, math.sqrt(L))
        dist.append(np.linalg.norm(out - oracle))
    assert dist[1] < dist[0]

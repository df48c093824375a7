import json
import math

import numpy as np
import pytest

from attnlab.audit import (LEMMAS, audit_mha_param, audit_softmax, lipschitz_audit, mha_input_constant,
                           mha_param_bound)
from attnlab.linalg import ConjugatePair
from attnlab.attention import AttentionHeadParams, MultiheadParams

PAIRS = [ConjugatePair(2, 2), ConjugatePair(1, math.inf), ConjugatePair(math.inf, 1)]


def heads(seed, d=4, d_p=2, h=2):
    g = np.random.default_rng(seed)
    return MultiheadParams([AttentionHeadParams(g.standard_normal((d, d_p)), g.standard_normal((d, d_p)),
                                                g.standard_normal((d, d))) for _ in range(h)])


def test_zero_parameter_change_predicts_zero():
    X = np.random.default_rng(0).standard_normal((5, 4))
    W = heads(1)
    assert mha_param_bound(X, W, W, ConjugatePair()) == 0.0


def test_identical_keys_give_zero_softmax_change():
    res = audit_softmax(4, 0, ConjugatePair())
    assert res.extra["identical_keys_lhs"] == 0.0


def test_unperturbed_first_trial_has_ratio_zero():
    res = audit_mha_param(1, 0, ConjugatePair())
    assert res.max_ratio == 0.0


def test_input_constant_grows_with_radius():
    W = heads(2)
    assert mha_input_constant(W, 2.0, ConjugatePair()) > mha_input_constant(W, 1.0, ConjugatePair())


@pytest.mark.parametrize("pair", PAIRS, ids=lambda p: f"{p.r}-{p.s}")
def test_short_audit_passes_for_every_pair(pair):
    rep = lipschitz_audit(trials=40, seed=3, pair=pair)
    assert [r.name for r in rep.results] == list(LEMMAS)
    for r in rep.results:
        assert r.max_ratio <= 1.0 + 1e-9, r.name
        assert r.max_ratio > 0.0
    assert rep.passed


def test_lemma_selection():
    rep = lipschitz_audit(trials=5, seed=0, lemmas=("mag",))
    assert [r.name for r in rep.results] == ["mag"]


def test_dump_is_bit_exact(tmp_path):
    rep = lipschitz_audit(trials=5, seed=0, lemmas=("lip-sm",))
    path = tmp_path / "audit.json"
    rep.dump(path)
    payload = json.loads(path.read_text())
    res = rep.results[0]
    assert float.fromhex(payload["lip-sm"]["max_ratio"]) == res.max_ratio
    K = payload["lip-sm"]["instance"]["K"]
    restored = np.array([float.fromhex(v) for v in K["data"]]).reshape(K["shape"])
    np.testing.assert_array_equal(restored, res.worst["K"])


def test_audit_is_deterministic():
    a = lipschitz_audit(trials=10, seed=9)
    b = lipschitz_audit(trials=10, seed=9)
    assert [r.max_ratio for r in a.results] == [r.max_ratio for r in b.results]


def test_value_norm_factor_is_needed_for_large_value_weights():
    # The output is linear in W_v, so a query change costs more as W_v grows.
    # Without the w_v factor the predicted change does not grow with it.
    from attnlab.attention import mha
    from attnlab.kernels import KernelSpec

    pair = ConjugatePair()
    spec = KernelSpec.rbf(2, s=pair.s)
    g = np.random.default_rng(3)
    X = 0.3 * g.standard_normal((6, 4))
    base = heads(4)
    W = MultiheadParams([AttentionHeadParams(hp.W_q, hp.W_k, 1000.0 * hp.W_v) for hp in base.heads])
    Wh = MultiheadParams([AttentionHeadParams(hp.W_q + 1e-4 * g.standard_normal(hp.W_q.shape), hp.W_k, hp.W_v)
                          for hp in W.heads])
    diff = mha(X, W, spec) - mha(X, Wh, spec)
    lhs = float(np.max(np.linalg.norm(diff, axis=1)))
    assert lhs <= mha_param_bound(X, W, Wh, pair)
    assert lhs > mha_param_bound(X, W, Wh, pair, with_value_norm=False)


def test_softmax_bound_needs_the_radius_of_both_key_sets():
    # With q = 0 and K = 0 a radius taken from K alone predicts no change,
    # yet moving one key changes the weights.
    from attnlab.attention import sm_weights
    from attnlab.kernels import KernelSpec

    spec = KernelSpec.rbf(2, s=2.0)
    q = np.zeros((1, 2))
    K = np.zeros((2, 2))
    K_hat = np.array([[0.5, 0.0], [0.0, 0.0]])
    lhs = float(np.sum(np.abs(sm_weights(spec, K, q)[0] - sm_weights(spec, K_hat, q)[0])))
    step = 0.5
    assert lhs > (0.0 + 0.0) * step
    assert lhs <= (0.0 + 0.5) * step

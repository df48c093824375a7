import csv
import inspect
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnlab.bounds import (LABEL, bound_report, covering_bound, data_radius, dudley_numeric,
                            empirical_rademacher, generalization_gap, layer_constants, matrix_ball_log_cover,
                            propagation, radii, rademacher_term, safe_ratio, simplify_intermediate)
from attnlab.experiments import rademacher_experiment
from attnlab.kernels import KernelSpec
from attnlab.linalg import ConjugatePair
from attnlab.transformer import LayerBudget, NormBudget, init_params, realized_norms

import oracles


def random_budget(g, T=None, h=None, zero_prob=0.0):
    T = T or int(g.integers(1, 4))
    h = h or int(g.integers(1, 4))

    def val():
        return 0.0 if g.uniform() < zero_prob else float(g.uniform(0.0, 3.0))

    layers = []
    for _ in range(T):
        layers.append(LayerBudget(val(), val(), val(), val(), *[tuple(val() for _ in range(h)) for _ in range(6)]))
    return NormBudget(layers)


def budget_dict(layer):
    return {k: getattr(layer, k) for k in ("alpha_x", "alpha_sigma", "R_x", "R_sigma", "omega_q", "omega_k",
                                           "omega_v", "R_q", "R_k", "R_v")}


# ---------------------------------------------------------------------------
# Layer constants
# ---------------------------------------------------------------------------


def test_all_ones_single_head_constants():
    c = layer_constants(NormBudget.uniform(1, 1))[0]
    assert (c.alpha_tilde, c.omega_tilde_v, c.gamma, c.omega_qk) == (2.0, 2.0, 2.0, 2.0)
    assert c.zeta == 2.0
    assert c.kappa == 1.0


def test_all_zero_constants():
    c = layer_constants(NormBudget.uniform(1, 2, value=0.0))[0]
    assert (c.alpha_tilde, c.omega_tilde_v, c.gamma, c.zeta) == (1.0, 1.0, 1.0, 0.0)
    assert c.kappa == 0.0


def test_zero_value_norm_with_query_mass_gives_infinite_kappa():
    c = layer_constants(NormBudget.uniform(1, 1, omega_v=0.0))[0]
    assert c.kappa == math.inf


def test_negative_norm_is_rejected():
    with pytest.raises(ValueError):
        layer_constants(NormBudget.uniform(1, 1, R_v=-1.0))


def test_safe_ratio_conventions():
    assert safe_ratio(0.0, 0.0) == 0.0
    assert safe_ratio(1.0, 0.0) == math.inf
    assert safe_ratio(3.0, 2.0) == 1.5


# ---------------------------------------------------------------------------
# Radii
# ---------------------------------------------------------------------------


def test_single_layer_transformer_coefficient_is_ffn_ratio():
    nb = NormBudget.uniform(1, 2, value=0.7, R_x=1.3)
    c = layer_constants(nb)[0]
    assert radii([c], 1.9).R_trans == c.ffn_coef / c.alpha_tilde


def test_two_layer_all_ones_hand_values():
    rad = radii(layer_constants(NormBudget.uniform(2, 1)), 1.0)
    assert rad.R == [1.0, 4.0, 16.0]
    assert rad.rho_tilde == [6.0, 66.0]
    assert rad.R_mha == [5.0, 65.0]
    # (5/6)(66/2) + (2/2)(66/2) + (2/2)
    assert rad.R_trans == 61.5


def test_data_radius_is_homogeneous():
    Xs = [np.random.default_rng(k).standard_normal((5, 3)) for k in range(3)]
    assert data_radius([2.0 * X for X in Xs]) == 2.0 * data_radius(Xs)


def test_data_radius_uses_largest_token_norm():
    X = np.array([[3.0, 4.0], [1.0, 0.0]])
    assert data_radius([X]) == 5.0
    assert data_radius([X], ConjugatePair(1, math.inf)) == 7.0
    with pytest.raises(ValueError):
        data_radius([])


def test_radii_nondecreasing_for_unit_factors():
    g = np.random.default_rng(3)
    for _ in range(20):
        rad = radii(layer_constants(random_budget(g)), float(g.uniform(0, 2)))
        assert all(b >= a for a, b in zip(rad.R, rad.R[1:]))


# ---------------------------------------------------------------------------
# Straight-line oracle
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(100))
def test_arithmetic_matches_straight_line_oracle(seed):
    g = np.random.default_rng(seed)
    nb = random_budget(g, zero_prob=0.1 if seed % 4 == 0 else 0.0)
    R0 = float(g.uniform(0.0, 2.0))
    consts = layer_constants(nb)
    ref = [oracles.layer_constants_ref(budget_dict(layer)) for layer in nb.layers]
    for c, r in zip(consts, ref):
        for k, v in r.items():
            assert getattr(c, k) == v, k
    rad = radii(consts, R0)
    R, rho, rmha, total = oracles.radii_ref(ref, R0)
    assert (rad.R, rad.rho_tilde, rad.R_mha, rad.R_trans) == (R, rho, rmha, total)
    D, h, T = int(g.integers(1, 9)), nb.layers[0].h, nb.T
    eps, n = float(g.uniform(0.01, 5.0)), int(g.integers(1, 1000))
    assert covering_bound(D, h, T, R[T], total, eps) == oracles.covering_ref(D, h, T, R[T], total, eps)
    rt = rademacher_term(D, h, T, R[T], total, n)
    assert rt == oracles.rademacher_ref(D, h, T, R[T], total, n)
    assert generalization_gap([rt, 0.5 * rt], n, 0.05) == oracles.generalization_ref([rt, 0.5 * rt], n, 0.05)


# ---------------------------------------------------------------------------
# Covering numbers
# ---------------------------------------------------------------------------


def test_matrix_ball_example_is_log_two():
    assert matrix_ball_log_cover(1, 1, 1.0, 2.0) == math.log(2.0)


def test_covering_bound_vanishes_for_large_resolution():
    assert covering_bound(4, 2, 2, 3.0, 5.0, 1e300) < 1e-290


@given(st.floats(0.01, 10), st.floats(0.01, 10), st.integers(1, 4), st.integers(1, 3), st.integers(1, 6))
def test_covering_bound_monotonicity(eps, extra, h, T, D):
    base = covering_bound(D, h, T, 2.0, 3.0, eps)
    assert covering_bound(D, h, T, 2.0, 3.0, eps + extra) <= base
    assert covering_bound(D, h + 1, T, 2.0, 3.0, eps) >= base
    assert covering_bound(D, h, T + 1, 2.0, 3.0, eps) >= base
    assert covering_bound(D + 1, h, T, 2.0, 3.0, eps) >= base


def test_nonpositive_resolution_is_rejected():
    with pytest.raises(ValueError):
        covering_bound(1, 1, 1, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        matrix_ball_log_cover(1, 1, 1.0, -1.0)


@pytest.mark.parametrize("seed", range(20))
def test_sub_bounds_stay_within_closed_form(seed):
    g = np.random.default_rng(100 + seed)
    nb = random_budget(g)
    consts = layer_constants(nb)
    rad = radii(consts, float(g.uniform(0.1, 2.0)))
    h = nb.layers[0].h
    d, d_sigma = 2 * h, int(g.integers(1, 9))
    D = max(d, d_sigma)
    prop = propagation(consts, rad, d, d_sigma, h, D, float(g.uniform(0.1, 3.0)))
    assert prop.total <= prop.closed_form
    assert len(prop.mha_bounds) == nb.T - 1


# ---------------------------------------------------------------------------
# Rademacher and generalization
# ---------------------------------------------------------------------------


def test_rademacher_term_scales_as_inverse_root_n():
    assert rademacher_term(3, 2, 2, 4.0, 5.0, 400) == pytest.approx(rademacher_term(3, 2, 2, 4.0, 5.0, 100) / 2,
                                                                    rel=1e-15)


@pytest.mark.parametrize("n", [1, 7, 100])
def test_degenerate_rademacher_term(n):
    assert rademacher_term(1, 1, 1, 0.0, 0.0, n) == pytest.approx(12 * math.sqrt(5) * math.sqrt(2) / math.sqrt(n),
                                                                  rel=1e-15)


def test_generalization_gap_validates_inputs():
    with pytest.raises(ValueError):
        generalization_gap([1.0], 10, 1.0)
    with pytest.raises(ValueError):
        generalization_gap([1.0], 0, 0.1)


def test_dudley_infimum_is_below_closed_form():
    closed = rademacher_term(4, 2, 2, 3.0, 5.0, 100)
    assert dudley_numeric(4, 2, 2, 3.0, 5.0, 100) <= closed


def test_bound_formulas_take_no_length_argument():
    for fn in (bound_report, covering_bound, rademacher_term, generalization_gap, radii, layer_constants):
        assert "L" not in inspect.signature(fn).parameters


def test_report_is_identical_for_short_and_long_sequences():
    p = init_params(4, 2, 2, 4, 1, 2, 0, scale=0.7)
    norms = realized_norms(p)
    base = np.random.default_rng(1).standard_normal((3, 8, 4))
    long = np.tile(base, (1, 1024, 1))
    assert long.shape[1] == 8192
    a = bound_report(norms, data_radius(base), 4, 4, 2, 1, 50)
    b = bound_report(norms, data_radius(long), 4, 4, 2, 1, 50)
    assert a.to_csv() == b.to_csv()
    assert a.globals["gen_bound"] == b.globals["gen_bound"]


@pytest.mark.parametrize("seed", range(50))
def test_simplification_path(seed):
    g = np.random.default_rng(200 + seed)
    nb = random_budget(g)
    R0 = float(g.uniform(0.01, 3.0))
    rep = bound_report(nb, R0, 4, 4, 2, 1, 100)
    gl = rep.globals
    T = nb.T
    assert gl["RT"] * gl["R_trans"] <= simplify_intermediate(T, gl["gamma"], gl["zeta"], gl["kappa"], R0)
    assert gl["simplify_ratio"] <= 4.0


def test_report_serialization():
    rep = bound_report(NormBudget.uniform(2, 2), 1.0, 4, 4, 2, 1, 10)
    text = rep.to_csv()
    assert text.startswith("# schema=1\n# label=" + LABEL + "\n")
    rows = list(csv.reader(io.StringIO(text.split("\n", 2)[2])))
    assert rows[0][:2] == ["scope", "t"]
    assert len(set(rows[0])) == len(rows[0])
    assert "kappa_max" in rows[0]
    assert [r[0] for r in rows[1:]] == ["layer", "layer", "global"]
    assert "\r" not in text
    assert LABEL in rep.to_text()
    assert all(v >= 0 for row in rep.layers for v in row.values())


# ---------------------------------------------------------------------------
# Empirical Rademacher complexity
# ---------------------------------------------------------------------------


def _zero_params(gen):
    p = init_params(4, 2, 2, 3, 1, 1, int(gen.integers(100)))
    for W in p.to_dict().values():
        W[...] = 0.0
    return p


def test_zero_class_has_zero_complexity():
    X = np.random.default_rng(0).standard_normal((10, 5, 4))
    est = empirical_rademacher(_zero_params, X, KernelSpec.rbf(2), 4, 20, 0)
    assert np.all(est.estimate == 0.0)


def test_estimate_is_invariant_under_row_permutation():
    X = np.random.default_rng(0).standard_normal((10, 5, 4))

    def sampler(gen):
        return init_params(4, 2, 2, 3, 1, 1, int(gen.integers(2**32)), scale=0.8)

    a = empirical_rademacher(sampler, X, KernelSpec.rbf(2), 8, 50, 1)
    b = empirical_rademacher(sampler, X[np.random.default_rng(5).permutation(10)], KernelSpec.rbf(2), 8, 50, 1)
    np.testing.assert_array_equal(a.estimate, b.estimate)


@pytest.mark.parametrize("kwargs", [{}, {"T": 2, "n": 16}, {"h": 1, "d_p": 4, "scale": 1.5}])
def test_estimate_is_below_covering_bound(kwargs):
    res = rademacher_experiment(n_params=16, n_signs=50, **kwargs)
    assert res["passed"]
    assert np.all(res["estimate"].estimate <= res["bound"])

import numpy as np
import pytest

from attnlab import experiments as ex
from attnlab.latent import LatentModelSpec


def test_run_trials_preserves_order_across_workers():
    def fn(s):
        return s * s
    assert ex.run_trials(fn, 7, workers=3) == ex.run_trials(fn, 7) == [s * s for s in range(7)]


@pytest.mark.parametrize("Ls", [[], [0, 4], [8, 8], [16, 8]])
def test_length_lists_are_validated(Ls):
    with pytest.raises(ValueError):
        ex._check_lengths(Ls)


def test_tanh_model_conditional_mean_is_noise_free_value():
    m = ex.TanhModel(d_p=3, d_v=2, noise=0.0)
    M = m.draw_map(0)
    K, V = m.sample(M, 5, 1)
    np.testing.assert_allclose(np.linalg.norm(K, axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(V, np.vstack([m.conditional_mean(M, k) for k in K]), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("mechanism", ["cme", "sm"])
def test_convergence_table_shape_and_worker_independence(mechanism):
    cfg = ex.ConvergenceConfig(Ls=(16, 64), seeds=3)
    rows = ex.convergence_table(mechanism, cfg, 5)
    assert [r["L"] for r in rows] == [16, 64]
    assert all(r["mechanism"] == mechanism and r["seed_count"] == 3 for r in rows)
    assert all(r["q25"] <= r["median"] <= r["q75"] for r in rows)
    par = ex.convergence_table(mechanism, ex.ConvergenceConfig(Ls=(16, 64), seeds=3, workers=3), 5)
    assert par == rows


def test_convergence_rejects_unknown_mechanism():
    with pytest.raises(ValueError):
        ex.convergence_errors("linear", ex.ConvergenceConfig(Ls=(8,), seeds=1), 0)


def test_identity_single_head_limit_shrinks():
    rows = ex.singlehead_table(ex.LimitConfig(Ls=(32, 512), seeds=4, identity=True), 0)
    h1 = [r["median"] for r in rows if r["h"] == 1]
    assert h1[1] < h1[0]
    assert {r["h"] for r in rows} == {1, 2}


def test_kde_check_small_run():
    res = ex.kde_check(n_queries=3, n_mc=20_000, seed=1)
    assert res.C.shape == (3,)
    assert np.all(res.C > 0)
    assert np.all(res.orth <= 5 * res.orth_se)


def test_sphere_lemma_small_run():
    res = ex.sphere_lemma_check(n=20_000, seed=2)
    assert res.passed
    big = res.large_temperature
    assert abs(big["coefficient"]) <= 5 * big["coefficient_se"]


def test_teacher_dataset_shares_teacher():
    a, B = ex.teacher_dataset(4, 3, 2, 1, 0)
    b, B2 = ex.teacher_dataset(4, 3, 2, 1, 1, B)
    assert B2 is B
    np.testing.assert_allclose(b.Y, 0.5 * np.tanh(b.X.mean(axis=1) @ B))


def test_train_toy_small_run():
    res = ex.train_toy(ex.ToyConfig(n=16, n_test=32, steps=50), 0)
    rep = res["report"]
    assert rep["train_loss"] <= rep["initial_loss"]
    assert rep["gen_bound"] > 0 and rep["rademacher"] > 0


def test_ssl_transfer_small_run():
    cfg = ex.TransferConfig(latent=LatentModelSpec(d=4, d_c=3, d_r=1, L=6, noise=0.1), n_pretrain=32,
                            n_downstream=16, n_test=32, pretrain_steps=20, downstream_steps=20)
    rep = ex.ssl_transfer(cfg, 0)["report"]
    assert rep["frozen_ok"] == 1.0
    assert rep["mu"] >= 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovcgp.exact import (condition_exact, fit_exact, log_marginal_likelihood, predict,
                         train_hypers_exact)
from ovcgp.kernels import KernelHyperparams, matern52_ard
from ovcgp.noise import NoiseModel, as_noise


def toy(seed, n=10, d=1, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, d))
    y = np.sin(2 * X).sum(1) + np.sqrt(noise) * rng.standard_normal(n)
    prm = KernelHyperparams.create(np.full(d, 0.7), 1.3, 0.2, noise)
    return X, y, prm


# ---------------------------------------------------------------- noise model

def test_noise_blocks_dense_and_solve():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    nm = NoiseModel.homoskedastic(0.5, 2).concat(NoiseModel.dense(A @ A.T + np.eye(3)))
    D = nm.to_dense()
    assert nm.size == 5
    B = rng.standard_normal((5, 2))
    np.testing.assert_allclose(nm.solve(B), np.linalg.solve(D, B), rtol=1e-10)
    np.testing.assert_allclose(nm.logdet(), np.linalg.slogdet(D)[1], rtol=1e-12)
    W = nm.inv_sqrt()
    np.testing.assert_allclose(W @ D @ W.T, np.eye(5), atol=1e-10)


def test_noise_rejects_negative_variance():
    with pytest.raises(ValueError):
        NoiseModel.homoskedastic(-1.0, 3)


def test_as_noise_forms():
    prm = KernelHyperparams.default(1, noise_variance=0.3)
    np.testing.assert_allclose(as_noise(None, 3, prm).diag(), 0.3)
    np.testing.assert_allclose(as_noise([1.0, 2.0], 2, prm).diag(), [1.0, 2.0])
    with pytest.raises(ValueError):
        as_noise([1.0, 2.0], 3, prm)


# ---------------------------------------------------------------- fit and predict

def test_cache_a_scalar_example():
    prm = KernelHyperparams.create([1.0], 1.0, 0.0, 1.0)
    m = fit_exact(np.zeros((1, 1)), np.array([2.0]), None, prm)
    np.testing.assert_allclose(m.cache_a, [1.0])


def test_cache_a_zero_at_mean():
    X, _, prm = toy(1)
    m = fit_exact(X, np.full(10, prm.mean_const), None, prm)
    np.testing.assert_allclose(m.cache_a, 0.0, atol=1e-12)


def test_caches_match_dense_oracle():
    X, y, prm = toy(2, n=20)
    m = fit_exact(X, y, None, prm)
    Ky = matern52_ard(X, X, prm) + prm.noise_variance * np.eye(20)
    np.testing.assert_allclose(m.cache_a, np.linalg.solve(Ky, y - prm.mean_const), rtol=1e-8)
    np.testing.assert_allclose(m.cache_R @ m.cache_R.T, np.linalg.inv(Ky), rtol=1e-8,
                               atol=1e-10)


def test_predict_matches_dense_formula():
    X, y, prm = toy(3)
    Xt = np.linspace(-2, 2, 5)[:, None]
    post = predict(fit_exact(X, y, None, prm), Xt)
    Ky = matern52_ard(X, X, prm) + prm.noise_variance * np.eye(10)
    Kt = matern52_ard(Xt, X, prm)
    mean = prm.mean_const + Kt @ np.linalg.solve(Ky, y - prm.mean_const)
    cov = matern52_ard(Xt, Xt, prm) - Kt @ np.linalg.solve(Ky, Kt.T)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-10)
    np.testing.assert_allclose(post.covariance, cov, atol=1e-10)
    np.testing.assert_allclose(post.variance, np.diag(cov), atol=1e-10)


def test_prior_reversion_far_away():
    X, y, prm = toy(4)
    post = predict(fit_exact(X, y, None, prm), np.array([[1e3]]))
    np.testing.assert_allclose(post.mean, prm.mean_const, atol=1e-10)
    np.testing.assert_allclose(post.variance, prm.outputscale, rtol=1e-10)


def test_interpolation_limit():
    X, y, prm = toy(5)
    prm = prm.replace(noise_variance=1e-9)
    post = predict(fit_exact(X, y, None, prm), X[:3], full_cov=False)
    np.testing.assert_allclose(post.mean, y[:3], atol=1e-5)
    assert np.all(post.variance < 1e-6)


# ---------------------------------------------------------------- marginal likelihood

def test_lml_scalar_examples():
    prm = KernelHyperparams.create([1.0], 0.5, 0.0, 0.5)
    val = log_marginal_likelihood(np.zeros((1, 1)), np.zeros(1), None, prm)
    np.testing.assert_allclose(val, -0.9189385, atol=1e-6)
    prm = KernelHyperparams.create([1.0], 1.0, 0.0, 1.0)
    val = log_marginal_likelihood(np.zeros((1, 1)), np.array([2.0]), None, prm)
    np.testing.assert_allclose(val, -2.2655, atol=1e-4)


def test_lml_chain_rule_decomposition():
    X, y, prm = toy(6, n=8)
    total = log_marginal_likelihood(X, y, None, prm)
    seq = 0.0
    for i in range(8):
        if i == 0:
            mu, var = prm.mean_const, prm.outputscale
        else:
            post = predict(fit_exact(X[:i], y[:i], None, prm), X[i:i + 1], full_cov=False)
            mu, var = post.mean[0], post.variance[0]
        var = var + prm.noise_variance
        seq += -0.5 * (y[i] - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
    np.testing.assert_allclose(total, seq, rtol=1e-8)


def test_heteroskedastic_lml_uses_dense_noise():
    X, y, prm = toy(7, n=6)
    noise = np.linspace(0.05, 0.5, 6)
    Ky = matern52_ard(X, X, prm) + np.diag(noise)
    r = y - prm.mean_const
    ref = -0.5 * r @ np.linalg.solve(Ky, r) - 0.5 * np.linalg.slogdet(Ky)[1] - 3 * np.log(2 * np.pi)
    np.testing.assert_allclose(log_marginal_likelihood(X, y, noise, prm), ref, rtol=1e-10)


# ---------------------------------------------------------------- conditioning

def test_condition_empty_batch_is_identity():
    X, y, prm = toy(8)
    m = fit_exact(X, y, None, prm)
    assert condition_exact(m, np.zeros((0, 1)), np.zeros(0)) is m


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_condition_matches_refit(seed):
    X, y, prm = toy(seed, n=25)
    Xt = np.linspace(-2.5, 2.5, 7)[:, None]
    m = condition_exact(fit_exact(X[:20], y[:20], None, prm), X[20:], y[20:])
    ref = predict(fit_exact(X, y, None, prm), Xt)
    post = predict(m, Xt)
    np.testing.assert_allclose(post.mean, ref.mean, atol=1e-6)
    np.testing.assert_allclose(post.covariance, ref.covariance, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_condition_never_increases_variance(seed):
    X, y, prm = toy(seed, n=15)
    Xt = np.random.default_rng(seed).uniform(-3, 3, (20, 1))
    m = fit_exact(X[:10], y[:10], None, prm)
    before = predict(m, Xt, full_cov=False).variance
    after = predict(condition_exact(m, X[10:], y[10:]), Xt, full_cov=False).variance
    assert np.all(after <= before + 1e-8)


def test_condition_single_point_tiny_noise():
    X, y, prm = toy(9)
    m = condition_exact(fit_exact(X, y, None, prm), np.array([[3.0]]), np.array([5.0]), 1e-10)
    np.testing.assert_allclose(predict(m, np.array([[3.0]])).mean, 5.0, atol=1e-4)


def test_condition_batched_fantasies():
    X, y, prm = toy(10)
    m = fit_exact(X, y, None, prm)
    Xn = np.array([[0.3], [1.1]])
    Y = np.random.default_rng(0).standard_normal((4, 2))
    fm = condition_exact(m, Xn, Y)
    assert fm.batch_shape == (4,)
    for i in range(4):
        ref = fit_exact(np.concatenate([X, Xn]), np.concatenate([y, Y[i]]), None, prm)
        np.testing.assert_allclose(fm.cache_a[i], ref.cache_a, atol=1e-8)


# ---------------------------------------------------------------- training

def test_train_zero_steps_returns_init():
    X, y, prm = toy(11)
    assert train_hypers_exact(X, y, prm, steps=0) is prm


def test_train_does_not_decrease_objective():
    X, y, prm = toy(12, n=30)
    from ovcgp.exact import exact_objective
    new = train_hypers_exact(X, y, prm, steps=30)
    assert exact_objective(X, y, None, new) >= exact_objective(X, y, None, prm) - 1e-6


def test_train_noiseless_sine_generalises():
    rng = np.random.default_rng(13)
    X = rng.uniform(-3, 3, (30, 1))
    y = np.sin(X[:, 0])
    init = KernelHyperparams.create([1.0], 1.0, 0.0, 0.01)
    prm = train_hypers_exact(X, y, init, steps=60)
    Xt = np.linspace(-2.8, 2.8, 50)[:, None]
    rmse = np.sqrt(np.mean((predict(fit_exact(X, y, None, prm), Xt).mean - np.sin(Xt[:, 0])) ** 2))
    assert rmse < 0.1


def test_train_self_consistent_on_prior_draw():
    rng = np.random.default_rng(14)
    prm = KernelHyperparams.create([0.5], 1.0, 0.0, 0.05)
    X = rng.uniform(0, 6, (150, 1))
    K = matern52_ard(X, X, prm) + 0.05 * np.eye(150)
    y = np.linalg.cholesky(K) @ rng.standard_normal(150)
    from ovcgp.exact import exact_objective
    f0 = exact_objective(X, y, None, prm, use_priors=False)
    f1 = exact_objective(X, y, None, train_hypers_exact(X, y, prm, steps=50, use_priors=False),
                         use_priors=False)
    assert f1 >= f0 - 1e-6
    assert abs(f1 - f0) < 0.05 * abs(f0)

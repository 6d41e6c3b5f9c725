import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovcgp.errors import StateError
from ovcgp.exact import fit_exact, log_marginal_likelihood, predict
from ovcgp.kernels import KernelHyperparams, matern52_ard
from ovcgp.likelihoods import LikelihoodSpec, log_prob
from ovcgp.linalg import pivoted_cholesky
from ovcgp.noise import NoiseModel
from ovcgp.optim import fd_gradient
from ovcgp.sparse import (CanonicalState, InducingSet, VariationalState, add_canonical,
                          canonical_from_data, canonical_to_variational, osgpr_trace_terms,
                          select_inducing, sgpr_collapsed_elbo, sgpr_collapsed_elbo_grad,
                          sgpr_predict, svgp_elbo,
                          train_sparse, variational_to_canonical, whitened_kl)

PRM = KernelHyperparams.create([0.6], 1.2, 0.3, 0.05)


def data(seed, n=30, d=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, (n, d))
    y = np.sin(2 * X).sum(1) + 0.2 * rng.standard_normal(n)
    return X, y


def random_state(seed, p=8):
    X, y = data(seed, n=40)
    Z = np.linspace(-3, 3, p)[:, None]
    return canonical_to_variational(canonical_from_data(X, y, None, Z, PRM))


# ---------------------------------------------------------------- inducing sets

def test_inducing_set_rejects_duplicates():
    with pytest.raises(ValueError):
        InducingSet(np.array([[0.0], [1.0], [0.0]]))


def test_select_inducing_all_candidates():
    X, _ = data(0, n=6)
    ind = select_inducing(X, None, PRM, 6)
    assert sorted(ind.pivots) == list(range(6))


def test_select_inducing_homoskedastic_matches_pivoted_cholesky():
    X, _ = data(1, n=25)
    ind = select_inducing(X, None, PRM, 7)
    fac = pivoted_cholesky(matern52_ard(X, X, PRM), 7)
    np.testing.assert_array_equal(ind.pivots, fac.pivots)


def test_select_inducing_huge_noise_goes_last():
    # three identical-diagonal, well separated candidates; the noisy one is last
    X = np.array([[0.0], [10.0], [20.0]])
    ind = select_inducing(X, np.array([0.1, 1e6, 0.1]), PRM, 3)
    assert ind.pivots[-1] == 1


def test_select_inducing_beats_random():
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.uniform(0, 1, (200, 2))
        prm = KernelHyperparams.create([0.2, 0.2], 1.0)
        K = matern52_ard(X, X, prm)
        piv = select_inducing(X, None, prm, 10).residual_trace * prm.noise_variance
        idx = rng.choice(200, 10, replace=False)
        res = np.trace(K - K[:, idx] @ np.linalg.solve(K[np.ix_(idx, idx)], K[idx]))
        wins += piv < res
    assert wins >= 95


# ---------------------------------------------------------------- canonical state

def test_canonical_empty_batch():
    Z = np.linspace(-1, 1, 4)[:, None]
    can = canonical_from_data(np.zeros((0, 1)), np.zeros(0), None, Z, PRM)
    np.testing.assert_array_equal(can.c, 0)
    np.testing.assert_array_equal(can.C, 0)


def test_canonical_at_z_equals_x():
    Z = np.linspace(-1, 1, 5)[:, None]
    y = np.arange(5.0)
    can = canonical_from_data(Z, y, 0.1, Z, PRM)
    K = matern52_ard(Z, Z, PRM)
    np.testing.assert_allclose(can.c, K @ (y - PRM.mean_const) / 0.1, rtol=1e-12)
    np.testing.assert_allclose(can.C, K @ K / 0.1, rtol=1e-12)


def test_canonical_matches_direct_summation():
    X, y = data(2, n=12)
    Z = np.linspace(-3, 3, 4)[:, None]
    noise = np.linspace(0.1, 0.4, 12)
    can = canonical_from_data(X, y, noise, Z, PRM)
    c = np.zeros(4)
    C = np.zeros((4, 4))
    for i in range(12):
        k = matern52_ard(Z, X[i:i + 1], PRM)[:, 0]
        c += k * (y[i] - PRM.mean_const) / noise[i]
        C += np.outer(k, k) / noise[i]
    np.testing.assert_allclose(can.c, c, rtol=1e-10)
    np.testing.assert_allclose(can.C, C, rtol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 19))
def test_canonical_additivity(seed, split):
    X, y = data(seed, n=20)
    Z = np.linspace(-3, 3, 6)[:, None]
    full = canonical_from_data(X, y, None, Z, PRM)
    parts = add_canonical(canonical_from_data(X[:split], y[:split], None, Z, PRM),
                          canonical_from_data(X[split:], y[split:], None, Z, PRM))
    np.testing.assert_allclose(parts.c, full.c, atol=1e-10)
    np.testing.assert_allclose(parts.C, full.C, atol=1e-10)


# ---------------------------------------------------------------- forward / reverse map

def test_zero_canonical_is_prior():
    Z = np.linspace(-1, 1, 4)[:, None]
    st_ = canonical_to_variational(CanonicalState(Z, PRM, np.zeros(4), np.zeros((4, 4))))
    np.testing.assert_allclose(st_.m_bar, 0, atol=1e-14)
    np.testing.assert_allclose(st_.S_bar, np.eye(4), atol=1e-14)


def test_forward_map_unwhitened_formula():
    X, y = data(3)
    Z = np.linspace(-3, 3, 6)[:, None]
    can = canonical_from_data(X, y, None, Z, PRM)
    m, S = canonical_to_variational(can).unwhitened()
    K = matern52_ard(Z, Z, PRM)
    np.testing.assert_allclose(m, K @ np.linalg.solve(K + can.C, can.c), rtol=1e-8)
    np.testing.assert_allclose(S, K @ np.linalg.solve(K + can.C, K), atol=1e-10)


def test_huge_precision_collapses_covariance():
    Z = np.linspace(-1, 1, 3)[:, None]
    K = matern52_ard(Z, Z, PRM)
    st_ = canonical_to_variational(CanonicalState(Z, PRM, np.zeros(3), 1e8 * K @ K))
    assert np.abs(st_.unwhitened()[1]).max() < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_round_trip(seed):
    X, y = data(seed)
    Z = np.linspace(-3, 3, 7)[:, None]
    can = canonical_from_data(X, y, None, Z, PRM)
    back = variational_to_canonical(canonical_to_variational(can))
    np.testing.assert_allclose(back.c, can.c, atol=1e-8 * max(1, np.abs(can.c).max()))
    np.testing.assert_allclose(back.C, can.C, atol=1e-8 * max(1, np.abs(can.C).max()))


def test_reverse_of_near_prior_state():
    Z = np.linspace(-1, 1, 3)[:, None]
    st_ = VariationalState(Z, PRM, np.zeros(3), (1 - 1e-6) * np.eye(3))
    can = variational_to_canonical(st_)
    np.testing.assert_allclose(can.c, 0, atol=1e-12)
    assert np.abs(can.C).max() < 1e-5


def test_reverse_rejects_prior_width():
    Z = np.linspace(-1, 1, 3)[:, None]
    with pytest.raises(StateError):
        variational_to_canonical(VariationalState.prior(Z, PRM))


# ---------------------------------------------------------------- prediction

def test_prior_state_prediction():
    Z = np.linspace(-1, 1, 4)[:, None]
    Xt = np.linspace(-2, 2, 5)[:, None]
    post = sgpr_predict(VariationalState.prior(Z, PRM), Xt)
    np.testing.assert_allclose(post.mean, PRM.mean_const)
    np.testing.assert_allclose(post.covariance, matern52_ard(Xt, Xt, PRM), atol=1e-12)


def test_nystrom_exactness():
    X, y = data(4, n=15)
    Xt = np.linspace(-3, 3, 9)[:, None]
    st_ = canonical_to_variational(canonical_from_data(X, y, None, X, PRM))
    post = sgpr_predict(st_, Xt)
    ref = predict(fit_exact(X, y, None, PRM), Xt)
    np.testing.assert_allclose(post.mean, ref.mean, atol=1e-6)
    np.testing.assert_allclose(post.covariance, ref.covariance, atol=1e-6)


def test_far_test_point_reverts_to_prior():
    post = sgpr_predict(random_state(5), np.array([[500.0]]))
    np.testing.assert_allclose(post.mean, PRM.mean_const, atol=1e-10)
    np.testing.assert_allclose(post.variance, PRM.outputscale, rtol=1e-10)


# ---------------------------------------------------------------- bounds

def test_collapsed_elbo_equals_lml_at_z_equals_x():
    X, y = data(6, n=12)
    np.testing.assert_allclose(sgpr_collapsed_elbo(X, y, None, X, PRM),
                               log_marginal_likelihood(X, y, None, PRM), rtol=1e-9)


def test_collapsed_elbo_matches_dense_formula():
    X, y = data(7, n=20)
    Z = np.linspace(-3, 3, 5)[:, None]
    Kuu = matern52_ard(Z, Z, PRM)
    Kvu = matern52_ard(X, Z, PRM)
    Q = Kvu @ np.linalg.solve(Kuu, Kvu.T)
    s2 = PRM.noise_variance
    cov = Q + s2 * np.eye(20)
    r = y - PRM.mean_const
    ref = (-0.5 * r @ np.linalg.solve(cov, r) - 0.5 * np.linalg.slogdet(cov)[1]
           - 10 * np.log(2 * np.pi) - 0.5 / s2 * np.trace(matern52_ard(X, X, PRM) - Q))
    np.testing.assert_allclose(sgpr_collapsed_elbo(X, y, None, Z, PRM), ref, rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 10))
def test_collapsed_elbo_is_lower_bound(seed, p):
    X, y = data(seed, n=15)
    Z = np.random.default_rng(seed).uniform(-3, 3, (p, 1))
    assert (sgpr_collapsed_elbo(X, y, None, Z, PRM)
            <= log_marginal_likelihood(X, y, None, PRM) + 1e-8)


@pytest.mark.parametrize("seed,diagonal", [(0, False), (1, False), (2, True)])
def test_collapsed_elbo_gradient_matches_finite_differences(seed, diagonal):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(30, 3))
    y = np.sin(3 * X.sum(1)) + 0.1 * rng.standard_normal(30)
    Z = rng.uniform(size=(7, 3))
    prm = KernelHyperparams.create([0.4, 0.6, 0.8], 1.3, 0.2, 0.05)
    nz = rng.uniform(0.05, 0.5, 30) if diagonal else None
    noise = NoiseModel.diagonal(nz) if diagonal else None
    val, g_t, g_z = sgpr_collapsed_elbo_grad(X, y, Z, prm, nz)
    assert val == pytest.approx(sgpr_collapsed_elbo(X, y, noise, Z, prm), rel=1e-10)
    ft = lambda t: sgpr_collapsed_elbo(X, y, noise, Z, KernelHyperparams.from_vector(t))
    fz = lambda z: sgpr_collapsed_elbo(X, y, noise, z.reshape(Z.shape), prm)
    np.testing.assert_allclose(g_t, fd_gradient(ft, prm.to_vector(), 1e-6), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(g_z.ravel(), fd_gradient(fz, Z.ravel(), 1e-6), rtol=1e-5, atol=1e-5)
    if diagonal:
        assert g_t[-1] == 0.0


def test_svgp_elbo_equals_collapsed_at_optimum():
    X, y = data(8)
    Z = np.linspace(-3, 3, 6)[:, None]
    st_ = canonical_to_variational(canonical_from_data(X, y, None, Z, PRM))
    lik = LikelihoodSpec.gaussian(PRM.noise_variance)
    np.testing.assert_allclose(svgp_elbo(X, y, lik, st_),
                               sgpr_collapsed_elbo(X, y, None, Z, PRM), rtol=1e-6)


def test_svgp_elbo_prior_empty_batch_is_zero():
    Z = np.linspace(-1, 1, 3)[:, None]
    lik = LikelihoodSpec.poisson()
    assert svgp_elbo(np.zeros((0, 1)), np.zeros(0), lik, VariationalState.prior(Z, PRM)) == 0
    assert whitened_kl(VariationalState.prior(Z, PRM)) == 0


def test_svgp_elbo_poisson_matches_monte_carlo():
    rng = np.random.default_rng(9)
    X = rng.uniform(-1, 1, (5, 1))
    y = rng.poisson(2.0, 5).astype(float)
    st_ = random_state(9, p=4)
    lik = LikelihoodSpec.poisson()
    post = sgpr_predict(st_, X, full_cov=False)
    f = post.mean + post.std * rng.standard_normal((10 ** 6, 5))
    lp = log_prob(lik, y, f).sum(1)
    mc = lp.mean() - whitened_kl(st_)
    se = lp.std() / np.sqrt(lp.size)
    assert abs(svgp_elbo(X, y, lik, st_) - mc) < 3 * se


# ---------------------------------------------------------------- trace diagnostic

def test_trace2_zero_for_unchanged_inducing_points():
    st_ = random_state(10)
    X, _ = data(10, n=3)
    _, t2 = osgpr_trace_terms(st_, st_.Z, PRM, X, PRM.noise_variance)
    assert abs(t2) < 1e-8


def test_trace1_zero_when_batch_is_inducing_set():
    st_ = random_state(11)
    t1, _ = osgpr_trace_terms(st_, st_.Z, PRM, st_.Z, PRM.noise_variance)
    assert abs(t1) < 1e-8


def test_trace2_matches_dense_formula():
    st_ = random_state(12, p=6)
    new_Z = st_.Z + 0.15
    new_prm = PRM.replace(lengthscales=[0.5])
    _, t2 = osgpr_trace_terms(st_, new_Z, new_prm, np.zeros((0, 1)), 0.1)
    m, S = st_.unwhitened()
    Kold = matern52_ard(st_.Z, st_.Z, PRM)
    Kaa = matern52_ard(st_.Z, st_.Z, new_prm)
    Kab = matern52_ard(st_.Z, new_Z, new_prm)
    Kbb = matern52_ard(new_Z, new_Z, new_prm)
    D = Kaa - Kab @ np.linalg.solve(Kbb, Kab.T)
    ref = np.trace((np.linalg.inv(S) - np.linalg.inv(Kold)) @ D)
    np.testing.assert_allclose(t2, ref, rtol=1e-5)


# ---------------------------------------------------------------- training

def test_train_zero_steps_returns_init():
    X, y = data(13, n=50)
    Z = np.linspace(-3, 3, 5)[:, None]
    ind, prm, st_ = train_sparse(X, y, LikelihoodSpec.gaussian(0.05), Z, PRM, steps=0)
    np.testing.assert_array_equal(ind.Z, Z)
    assert prm == PRM
    ref = canonical_to_variational(canonical_from_data(X, y, None, Z, PRM))
    np.testing.assert_allclose(st_.m_bar, ref.m_bar)


def test_train_sine_accuracy_and_optimality():
    rng = np.random.default_rng(14)
    X = rng.uniform(-3, 3, (200, 1))
    f = lambda x: np.sin(2 * np.abs(x) + x ** 2 / 2)
    y = f(X[:, 0]) + 0.1 * rng.standard_normal(200)
    init = KernelHyperparams.create([1.0], 1.0, 0.0, 0.01)
    ind, prm, st_ = train_sparse(X, y, LikelihoodSpec.gaussian(0.01), None, init, steps=60,
                                 p=16)
    Xt = np.linspace(-3, 3, 100)[:, None]
    rmse = np.sqrt(np.mean((sgpr_predict(st_, Xt).mean - f(Xt[:, 0])) ** 2))
    assert rmse < 0.15
    lik = LikelihoodSpec.gaussian(prm.noise_variance)
    np.testing.assert_allclose(svgp_elbo(X, y, lik, st_),
                               sgpr_collapsed_elbo(X, y, None, ind.Z, prm), rtol=1e-6)

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ovcgp import ExactGPRegressor, SparseGPClassifier, SparseGPRegressor
from ovcgp.exact import fit_exact, predict


def sine(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, (n, 1))
    return X, np.sin(2 * X[:, 0]) + 0.1 * rng.standard_normal(n)


def test_exact_regressor_fits_and_conditions():
    X, y = sine(60, 0)
    est = ExactGPRegressor(lengthscale=0.5, train_steps=30).fit(X, y)
    Xt = np.linspace(-2.5, 2.5, 40)[:, None]
    mean, std = est.predict(Xt, return_std=True)
    assert np.sqrt(np.mean((mean - np.sin(2 * Xt[:, 0])) ** 2)) < 0.1
    assert np.all(std > 0)
    X2, y2 = sine(5, 1)
    est.condition(X2, y2)
    ref = predict(fit_exact(np.vstack([X, X2]), np.r_[y, y2], None, est.params_), Xt,
                  full_cov=False)
    np.testing.assert_allclose(est.predict(Xt), ref.mean, atol=1e-8)
    assert est.score(Xt, np.sin(2 * Xt[:, 0])) > 0.95


def test_sparse_regressor_stream_and_condition():
    X, y = sine(200, 2)
    est = SparseGPRegressor(n_inducing=12, lengthscale=0.5, train_steps=20,
                            optimize_inducing=False).fit(X[:80], y[:80])
    for i in range(80, 200, 40):
        est.partial_fit(X[i:i + 40], y[i:i + 40])
    assert est.inducing_points_.shape == (12, 1)
    assert "residual_trace" in est.last_diagnostics_
    Xt = np.linspace(-2.5, 2.5, 40)[:, None]
    assert np.sqrt(np.mean((est.predict(Xt) - np.sin(2 * Xt[:, 0])) ** 2)) < 0.15
    before = est.predict(Xt)
    model = est.condition(X[:3], y[:3])
    assert model.X.shape[0] == 12 + 3
    # conditioning returns a new model and leaves the estimator unchanged
    np.testing.assert_array_equal(est.predict(Xt), before)


def test_sparse_partial_fit_from_scratch_and_feature_check():
    X, y = sine(30, 3)
    est = SparseGPRegressor(n_inducing=5, train_steps=2).partial_fit(X, y)
    assert hasattr(est, "state_")
    with pytest.raises(ValueError):
        est.partial_fit(np.zeros((2, 3)), np.zeros(2))


def test_classifier_on_moons():
    from sklearn.datasets import make_moons
    X, y = make_moons(300, noise=0.15, random_state=0)
    labels = np.where(y == 1, "b", "a")
    clf = SparseGPClassifier(n_inducing=20, lengthscale=0.5, train_steps=20)
    clf.fit(X[:150], labels[:150])
    clf.partial_fit(X[150:], labels[150:])
    assert set(clf.predict(X)) <= {"a", "b"}
    assert clf.score(X, labels) > 0.85
    P = clf.predict_proba(X)
    np.testing.assert_allclose(P.sum(1), 1.0)
    assert np.all((P >= 0) & (P <= 1))
    with pytest.raises(ValueError):
        clf.partial_fit(X[:2], ["a", "c"])


def test_classifier_needs_two_classes():
    with pytest.raises(ValueError):
        SparseGPClassifier().fit(np.zeros((4, 1)), np.zeros(4))


@pytest.mark.parametrize("cls", [ExactGPRegressor, SparseGPRegressor, SparseGPClassifier])
def test_unfitted_and_clone(cls):
    est = cls(train_steps=3)
    with pytest.raises(NotFittedError):
        (est.decision_function if cls is SparseGPClassifier else est.predict)(np.zeros((1, 1)))
    c = clone(est)
    assert c.get_params() == est.get_params()

"""scikit-learn style wrappers around the functional API."""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exact import condition_exact, fit_exact, predict, train_hypers_exact
from .kernels import KernelHyperparams
from .likelihoods import LikelihoodSpec, laplace_surrogate_batch
from .ovc import ovc_condition, stream_step
from .sparse import sgpr_predict, train_sparse


def _init_params(X, lengthscale, outputscale, noise_variance, mean=None):
    return KernelHyperparams.create(np.full(X.shape[1], float(lengthscale)), outputscale,
                                    float(np.mean(mean)) if mean is not None else 0.0,
                                    noise_variance)


class ExactGPRegressor(RegressorMixin, BaseEstimator):
    """Exact GP regression with a Matérn-5/2 ARD kernel.

    Parameters
    ----------
    lengthscale, outputscale, noise_variance : float
        Initial hyperparameters.
    train_steps : int
        Adam steps on the marginal likelihood (0 keeps the initial values).
    lr : float
        Adam learning rate in log space.
    use_priors : bool
        Add the default Gamma hyperpriors to the objective.
    """

    def __init__(self, lengthscale=1.0, outputscale=1.0, noise_variance=0.01, train_steps=100,
                 lr=0.1, use_priors=True):
        self.lengthscale = lengthscale
        self.outputscale = outputscale
        self.noise_variance = noise_variance
        self.train_steps = train_steps
        self.lr = lr
        self.use_priors = use_priors

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        init = _init_params(X, self.lengthscale, self.outputscale, self.noise_variance, y)
        if self.train_steps:
            init = train_hypers_exact(X, y, init, steps=self.train_steps, lr=self.lr,
                                      use_priors=self.use_priors)
        self.params_ = init
        self.model_ = fit_exact(X, y, None, init)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        post = predict(self.model_, X, full_cov=False)
        return (post.mean, post.std) if return_std else post.mean

    def condition(self, X, y, noise=None):
        """Add observations without refitting hyperparameters."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.model_ = condition_exact(self.model_, X, y, noise)
        return self


class SparseGPRegressor(RegressorMixin, BaseEstimator):
    """Sparse GP regression that can be updated online.

    ``fit`` trains hyperparameters and inducing points on the collapsed
    bound. ``partial_fit`` streams further batches with pivoted inducing
    reselection and no retraining; ``condition`` returns an exact GP
    conditioned on the current state plus new data, leaving the
    estimator untouched.

    Parameters
    ----------
    n_inducing : int
        Number of inducing points ``p``.
    lengthscale, outputscale, noise_variance : float
        Initial hyperparameters.
    train_steps, lr : int, float
        Adam settings for ``fit``.
    optimize_inducing : bool
        Move inducing points during ``fit``.
    """

    def __init__(self, n_inducing=16, lengthscale=1.0, outputscale=1.0, noise_variance=0.01,
                 train_steps=100, lr=0.05, optimize_inducing=True):
        self.n_inducing = n_inducing
        self.lengthscale = lengthscale
        self.outputscale = outputscale
        self.noise_variance = noise_variance
        self.train_steps = train_steps
        self.lr = lr
        self.optimize_inducing = optimize_inducing

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        init = _init_params(X, self.lengthscale, self.outputscale, self.noise_variance, y)
        p = min(self.n_inducing, X.shape[0])
        _, self.params_, self.state_ = train_sparse(
            X, y, LikelihoodSpec.gaussian(self.noise_variance), None, init,
            steps=self.train_steps, lr=self.lr, p=p, optimize_inducing=self.optimize_inducing)
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y, noise=None):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if not hasattr(self, "state_"):
            return self.fit(X, y)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        self.state_, self.last_diagnostics_ = stream_step(self.state_, X, y, noise,
                                                          self.n_inducing)
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        post = sgpr_predict(self.state_, X, full_cov=False)
        return (post.mean, post.std) if return_std else post.mean

    def condition(self, X, y, noise=None):
        """Exact GP on the pseudo-data of the current state plus ``(X, y)``."""
        check_is_fitted(self, "state_")
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        return ovc_condition(self.state_, X, y, noise)

    @property
    def inducing_points_(self):
        check_is_fitted(self, "state_")
        return self.state_.Z


class SparseGPClassifier(ClassifierMixin, BaseEstimator):
    """Binary sparse GP classifier with a logistic link and Laplace updates.

    Labels may be any two values; they are mapped to {0, 1} in sorted order.
    """

    def __init__(self, n_inducing=16, lengthscale=0.3, outputscale=1.0, train_steps=50,
                 lr=0.05, refresh_every=10):
        self.n_inducing = n_inducing
        self.lengthscale = lengthscale
        self.outputscale = outputscale
        self.train_steps = train_steps
        self.lr = lr
        self.refresh_every = refresh_every

    def _encode(self, y):
        y = np.asarray(y)
        unknown = ~np.isin(y, self.classes_)
        if np.any(unknown):
            raise ValueError(f"unseen labels {np.unique(y[unknown])}")
        return (y == self.classes_[1]).astype(float)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError("SparseGPClassifier needs exactly two classes")
        yb = self._encode(y)
        init = _init_params(X, self.lengthscale, self.outputscale, 1.0)
        _, self.params_, self.state_ = train_sparse(
            X, yb, LikelihoodSpec.bernoulli(), None, init, steps=self.train_steps, lr=self.lr,
            p=min(self.n_inducing, X.shape[0]), optimize_inducing=False,
            refresh_every=self.refresh_every)
        self.n_features_in_ = X.shape[1]
        return self

    def partial_fit(self, X, y):
        if not hasattr(self, "state_"):
            return self.fit(X, y)
        X, y = check_X_y(X, y, dtype=float)
        yb = self._encode(y)
        lik = LikelihoodSpec.bernoulli()
        targets, noise = laplace_surrogate_batch(self.state_, X, yb, lik)
        self.state_, self.last_diagnostics_ = stream_step(self.state_, X, targets, noise,
                                                          self.n_inducing)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        return sgpr_predict(self.state_, X, full_cov=False).mean

    def predict_proba(self, X):
        """Probit-approximated predictive probability of the positive class."""
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        post = sgpr_predict(self.state_, X, full_cov=False)
        p1 = expit(post.mean / np.sqrt(1.0 + np.pi * post.variance / 8.0))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

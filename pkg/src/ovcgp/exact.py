"""Exact GP regression with block-diagonal noise and cached predictive terms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .kernels import KernelHyperparams, kernel_diag, matern52_ard
from .linalg import (chol_logdet, cholesky_with_jitter, tri_solve,
                     tri_solve_vec)
from .noise import NoiseModel, as_noise
from .optim import adam_ascent, hyperprior_logpdf

log = logging.getLogger(__name__)
LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PosteriorGaussian:
    """Predictive mean with either a full covariance or variances only."""

    mean: np.ndarray
    covariance: np.ndarray | None = None
    variance: np.ndarray | None = None

    def __post_init__(self):
        if self.variance is None and self.covariance is not None:
            object.__setattr__(self, "variance",
                               np.diagonal(self.covariance, axis1=-2, axis2=-1).copy())

    @property
    def std(self):
        return np.sqrt(np.clip(self.variance, 0.0, None))


@dataclass(frozen=True, eq=False)
class ExactGPModel:
    """A conditioned exact GP.

    ``cache_a = (K + Sigma)^{-1} (y - mean)`` and ``cache_R`` satisfies
    ``cache_R @ cache_R.T = (K + Sigma)^{-1}``. Any array field may carry
    leading batch axes (fantasy ensembles); they broadcast against each other.
    """

    X: np.ndarray
    y: np.ndarray
    noise: NoiseModel
    params: KernelHyperparams
    cache_a: np.ndarray
    cache_R: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[-2]

    @property
    def batch_shape(self):
        return np.broadcast_shapes(self.X.shape[:-2], self.y.shape[:-1],
                                   self.chol.shape[:-2])

    def train_covariance(self) -> np.ndarray:
        """``K(X, X) + Sigma`` (including any jitter the fit needed)."""
        K = matern52_ard(self.X, self.X, self.params) + self.noise.to_dense()
        return K + self.jitter * np.eye(self.n)

    def condition_number(self) -> np.ndarray:
        return np.linalg.cond(self.train_covariance())


# Some callers read better with this name.
FantasyModel = ExactGPModel


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if y.shape[-1] != X.shape[-2]:
        raise ValueError(f"X has {X.shape[-2]} rows but y has {y.shape[-1]}")
    return X, y


def _with_inverse(X, y, noise, params, L, jitter):
    eye = np.eye(L.shape[-1])
    Linv = tri_solve(L, np.broadcast_to(eye, L.shape))
    z = Linv @ (y - params.mean_const)[..., None]
    a = (np.swapaxes(Linv, -1, -2) @ z)[..., 0]
    return ExactGPModel(X, y, noise, params, a, np.swapaxes(Linv, -1, -2), L, jitter)


def fit_exact(X, y, noise=None, params: KernelHyperparams = None) -> ExactGPModel:
    """Fit the predictive caches of an exact GP.

    ``noise`` may be a :class:`NoiseModel`, a scalar variance, a vector of
    variances, or ``None`` for ``params.noise_variance``.
    """
    X, y = _check_xy(X, y)
    n = X.shape[-2]
    if n < 1:
        raise ValueError("need at least one training point")
    noise = as_noise(noise, n, params)
    K = matern52_ard(X, X, params) + noise.to_dense()
    fac = cholesky_with_jitter(K)
    return _with_inverse(X, y, noise, params, fac.L, fac.jitter_used)


def predict(model: ExactGPModel, X_test, full_cov: bool = True) -> PosteriorGaussian:
    """Posterior over latent values at ``X_test``."""
    X_test = np.asarray(X_test, dtype=float)
    if X_test.ndim == 1:
        X_test = X_test[:, None]
    p = model.params
    Kwv = matern52_ard(X_test, model.X, p)
    mean = p.mean_const + (Kwv @ model.cache_a[..., None])[..., 0]
    V = Kwv @ model.cache_R
    if full_cov:
        cov = matern52_ard(X_test, X_test, p) - V @ np.swapaxes(V, -1, -2)
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        return PosteriorGaussian(mean, cov)
    var = kernel_diag(X_test, p) - np.sum(V * V, axis=-1)
    return PosteriorGaussian(mean, variance=var)


def log_marginal_likelihood(X, y, noise=None, params: KernelHyperparams = None):
    """Log evidence ``log N(y | mean, K + Sigma)``."""
    X, y = _check_xy(X, y)
    n = X.shape[-2]
    noise = as_noise(noise, n, params)
    K = matern52_ard(X, X, params) + noise.to_dense()
    L = cholesky_with_jitter(K).L
    z = tri_solve_vec(L, y - params.mean_const)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * chol_logdet(L) - 0.5 * n * LOG2PI


def condition_exact(model: ExactGPModel, X_new, y_new, noise_new=None) -> ExactGPModel:
    """Add observations by extending the Cholesky factor of ``K + Sigma``.

    Cost is ``O(n^2 b)`` for ``b`` new points. New inputs and targets may
    carry batch axes that broadcast against the model's.
    """
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[:, None]
    y_new = np.asarray(y_new, dtype=float)
    b = X_new.shape[-2]
    if b == 0:
        return model
    if y_new.shape[-1] != b:
        raise ValueError("y_new does not match X_new")
    p = model.params
    noise_new = as_noise(noise_new, b, p)
    L11 = model.chol
    Linv11 = np.swapaxes(model.cache_R, -1, -2)
    K12 = matern52_ard(model.X, X_new, p)
    S = Linv11 @ K12                                   # L11^{-1} K12
    K22 = matern52_ard(X_new, X_new, p) + noise_new.to_dense()
    if model.jitter:
        K22 = K22 + model.jitter * np.eye(b)
    St = np.swapaxes(S, -1, -2)
    schur = K22 - St @ S
    schur = 0.5 * (schur + np.swapaxes(schur, -1, -2))
    L22 = cholesky_with_jitter(schur).L
    Linv22 = tri_solve(L22, np.broadcast_to(np.eye(b), L22.shape))
    batch = np.broadcast_shapes(L11.shape[:-2], L22.shape[:-2], S.shape[:-2])
    n = model.n
    L = np.zeros(batch + (n + b, n + b))
    L[..., :n, :n] = L11
    L[..., n:, :n] = St
    L[..., n:, n:] = L22
    Linv = np.zeros(batch + (n + b, n + b))
    Linv[..., :n, :n] = Linv11
    Linv[..., n:, :n] = -Linv22 @ St @ Linv11
    Linv[..., n:, n:] = Linv22
    Xb = np.broadcast_shapes(model.X.shape[:-2], X_new.shape[:-2])
    X = np.concatenate([np.broadcast_to(model.X, Xb + model.X.shape[-2:]),
                        np.broadcast_to(X_new, Xb + X_new.shape[-2:])], axis=-2)
    yb = np.broadcast_shapes(model.y.shape[:-1], y_new.shape[:-1])
    y = np.concatenate([np.broadcast_to(model.y, yb + model.y.shape[-1:]),
                        np.broadcast_to(y_new, yb + (b,))], axis=-1)
    z = Linv @ (y - p.mean_const)[..., None]
    a = (np.swapaxes(Linv, -1, -2) @ z)[..., 0]
    return ExactGPModel(X, y, model.noise.concat(noise_new), p, a,
                        np.swapaxes(Linv, -1, -2), L, model.jitter)


def exact_objective(X, y, noise, params, use_priors=True):
    val = log_marginal_likelihood(X, y, noise, params)
    if use_priors:
        val = val + hyperprior_logpdf(params)
    return float(val)


def train_hypers_exact(X, y, init: KernelHyperparams, steps: int = 100, lr: float = 0.1,
                       noise=None, use_priors: bool = True, min_noise: float = 1e-6,
                       fixed_noise: bool = False) -> KernelHyperparams:
    """Maximise the log marginal likelihood (plus hyperpriors) with Adam.

    Gradients are central finite differences in log-parameter space. The
    best parameters seen are returned, so the objective never ends below
    its starting value. ``noise`` fixes a known noise model; otherwise the
    homoskedastic noise in ``params`` is learned (unless ``fixed_noise``).
    """
    X, y = _check_xy(X, y)
    if steps <= 0:
        return init
    n = X.shape[-2]
    learn_noise = noise is None and not fixed_noise
    lo = np.full(init.dim + 3, -np.inf)
    hi = np.full(init.dim + 3, np.inf)
    lo[-1] = np.log(min_noise)
    lo[:init.dim] = np.log(1e-3)
    hi[:init.dim] = np.log(1e3)
    lo[init.dim] = np.log(1e-4)
    hi[init.dim] = np.log(1e4)
    mask = np.ones(init.dim + 3, dtype=bool)
    if not learn_noise:
        mask[-1] = False

    def f(v):
        prm = KernelHyperparams.from_vector(v)
        nz = noise if noise is not None else NoiseModel.homoskedastic(prm.noise_variance, n)
        return exact_objective(X, y, nz, prm, use_priors)

    v0 = init.to_vector()
    if not np.isfinite(f(v0)):
        raise NumericalError("initial marginal likelihood is not finite")
    v = adam_ascent(f, v0, steps=steps, lr=lr, lower=lo, upper=hi, mask=mask)
    return KernelHyperparams.from_vector(v)

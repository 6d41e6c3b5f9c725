"""Exponential-family likelihoods and local Laplace approximations.

Non-Gaussian observations are turned into Gaussian surrogates: targets at
the conditional mode ``f*`` and per-point noise ``1 / W`` where ``W`` is the
negative log-likelihood Hessian at the mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .kernels import KernelHyperparams, matern52_ard
from .noise import NoiseModel

KINDS = ("gaussian", "poisson", "bernoulli", "binomial")

# f is clipped here before exponentiating in the Poisson family
_FMAX = 50.0
# surrogate noise is capped at 1 / _WMIN
_WMIN = 1e-6


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str
    noise_variance: object = None
    trials: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown likelihood {self.kind!r}; choose from {KINDS}")
        if self.kind == "gaussian":
            nv = np.asarray(self.noise_variance, dtype=float)
            if self.noise_variance is None or np.any(nv <= 0):
                raise ValueError("Gaussian likelihood needs noise_variance > 0")
        if self.kind == "binomial":
            t = np.asarray(self.trials, dtype=float)
            if self.trials is None or np.any(t < 1) or np.any(t != np.round(t)):
                raise ValueError("binomial trial counts must be integers >= 1")

    @classmethod
    def gaussian(cls, noise_variance):
        return cls("gaussian", noise_variance=noise_variance)

    @classmethod
    def poisson(cls):
        return cls("poisson")

    @classmethod
    def bernoulli(cls):
        return cls("bernoulli")

    @classmethod
    def binomial(cls, trials):
        return cls("binomial", trials=np.asarray(trials, dtype=float))

    @property
    def is_gaussian(self):
        return self.kind == "gaussian"

    def subset(self, idx):
        """Restrict per-observation parameters to ``idx``."""
        if self.kind == "binomial" and np.ndim(self.trials):
            return LikelihoodSpec.binomial(np.asarray(self.trials)[idx])
        if self.kind == "gaussian" and np.ndim(self.noise_variance):
            return LikelihoodSpec.gaussian(np.asarray(self.noise_variance)[idx])
        return self

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        if self.kind == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise ValueError("Poisson observations must be non-negative integers")
        if self.kind == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise ValueError("Bernoulli observations must be 0 or 1")
        if self.kind == "binomial":
            if np.any(y < 0) or np.any(y > self.trials) or np.any(y != np.round(y)):
                raise ValueError("Binomial observations must be integers in [0, n]")

    def sample(self, f, rng):
        """Draw observations given latent values."""
        f = np.asarray(f, dtype=float)
        if self.kind == "gaussian":
            return f + np.sqrt(self.noise_variance) * rng.standard_normal(f.shape)
        if self.kind == "poisson":
            return rng.poisson(np.exp(np.minimum(f, _FMAX))).astype(float)
        if self.kind == "bernoulli":
            return (rng.random(f.shape) < expit(f)).astype(float)
        n = np.broadcast_to(self.trials, f.shape).astype(np.int64)
        return rng.binomial(n, expit(f)).astype(float)


def log_prob(lik: LikelihoodSpec, y, f):
    """Elementwise ``log p(y | f)``."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if lik.kind == "gaussian":
        s2 = lik.noise_variance
        return -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - f) ** 2 / s2
    if lik.kind == "poisson":
        fc = np.minimum(f, _FMAX)
        return y * f - np.exp(fc) - gammaln(y + 1.0)
    if lik.kind == "bernoulli":
        return y * f - np.logaddexp(0.0, f)
    n = lik.trials
    return (gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
            + y * f - n * np.logaddexp(0.0, f))


def loglik_grad_hess(lik: LikelihoodSpec, y, f):
    """Total log-likelihood with its gradient and Hessian diagonal in ``f``."""
    lik.check_support(y)
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if lik.kind == "gaussian":
        s2 = np.asarray(lik.noise_variance, dtype=float)
        grad = (y - f) / s2
        hess = np.broadcast_to(-1.0 / s2, f.shape).astype(float)
    elif lik.kind == "poisson":
        rate = np.exp(np.minimum(f, _FMAX))
        grad = y - rate
        hess = -rate
    elif lik.kind == "bernoulli":
        r = expit(f)
        grad = y - r
        hess = -r * (1.0 - r)
    else:
        r = expit(f)
        grad = y - lik.trials * r
        hess = -lik.trials * r * (1.0 - r)
    logp = np.sum(log_prob(lik, y, f), axis=-1)
    return logp, grad, hess


@dataclass(frozen=True)
class LaplaceSurrogate:
    f_star: np.ndarray
    W_diag: np.ndarray
    iterations: int
    converged: bool
    alpha: np.ndarray  # K^{-1} (f_star - mean)

    @property
    def noise(self):
        return 1.0 / np.maximum(self.W_diag, _WMIN)


def _map_objective(lik, y, f, a, mean):
    return np.sum(log_prob(lik, y, f), axis=-1) - 0.5 * np.sum(a * (f - mean), axis=-1)


def newton_map(K, y, lik: LikelihoodSpec, tol: float = 1e-6, max_iter: int = 50,
               mean: float = 0.0) -> LaplaceSurrogate:
    """Mode of ``log p(y | f) - 1/2 (f - mean)^T K^{-1} (f - mean)``.

    Newton iterations in the numerically stable ``B = I + W^1/2 K W^1/2``
    form, tracking ``a = K^{-1}(f - mean)`` so ``K`` may be singular. Each
    step is halved until the objective does not decrease. ``y`` may carry
    leading batch axes; the loop stops once every batch member has
    converged.
    """
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    lik.check_support(y)
    n = y.shape[-1]
    eye = np.eye(n)
    a = np.zeros(y.shape)
    f = np.full(y.shape, float(mean))
    psi = _map_objective(lik, y, f, a, mean)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        _, grad, hess = loglik_grad_hess(lik, y, f)
        W = np.maximum(-hess, 0.0)
        sW = np.sqrt(W)
        B = eye + sW[..., :, None] * K * sW[..., None, :]
        LB = np.linalg.cholesky(B)
        b = W * (f - mean) + grad
        Kb = (K @ b[..., None])[..., 0]
        c = np.linalg.solve(LB, (sW * Kb)[..., None])
        v = np.linalg.solve(np.swapaxes(LB, -1, -2), c)[..., 0]
        a_new = b - sW * v
        step = a_new - a
        t = np.ones(y.shape[:-1])
        for _ in range(30):
            a_try = a + t[..., None] * step
            f_try = mean + (K @ a_try[..., None])[..., 0]
            psi_try = _map_objective(lik, y, f_try, a_try, mean)
            worse = psi_try < psi - 1e-12 * (1.0 + np.abs(psi))
            if not np.any(worse):
                break
            t = np.where(worse, 0.5 * t, t)
        delta = np.max(np.abs(f_try - f))
        a, f, psi = a_try, f_try, psi_try
        if delta < tol:
            converged = True
            break
    _, _, hess = loglik_grad_hess(lik, y, f)
    return LaplaceSurrogate(f, np.maximum(-hess, 0.0), it, converged, a)


def _params_of(model) -> KernelHyperparams:
    if isinstance(model, KernelHyperparams):
        return model
    return model.params


def laplace_surrogate_batch(model, X_batch, y, lik: LikelihoodSpec, **newton_kw):
    """Gaussian surrogate ``(targets, noise)`` for a batch of observations.

    The prior kernel at ``X_batch`` (from ``model``'s hyperparameters)
    regularises the mode.
    """
    params = _params_of(model)
    X_batch = np.asarray(X_batch, dtype=float)
    K = matern52_ard(X_batch, X_batch, params)
    res = newton_map(K, y, lik, mean=params.mean_const, **newton_kw)
    return res.f_star, NoiseModel.diagonal(res.noise)

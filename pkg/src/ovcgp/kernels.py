"""Matern-5/2 ARD kernel and its hyperparameter container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class KernelHyperparams:
    """Kernel, mean and noise hyperparameters.

    Positive quantities are stored as logs so that optimisers can work in an
    unconstrained space; the public properties exponentiate on access.
    """

    log_lengthscales: np.ndarray
    log_outputscale: float
    mean_const: float
    log_noise: float

    def __post_init__(self):
        ll = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        object.__setattr__(self, "log_lengthscales", ll)
        vals = np.concatenate([ll, [self.log_outputscale, self.mean_const, self.log_noise]])
        if ll.ndim != 1 or ll.size == 0:
            raise ValueError("need one lengthscale per input dimension")
        if not np.all(np.isfinite(vals)):
            raise ValueError("hyperparameters must be finite")

    @classmethod
    def create(cls, lengthscales, outputscale=1.0, mean_const=0.0, noise_variance=1e-2):
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if np.any(ls <= 0) or outputscale <= 0 or noise_variance <= 0:
            raise ValueError("lengthscales, outputscale and noise must be > 0")
        return cls(np.log(ls), float(np.log(outputscale)), float(mean_const),
                   float(np.log(noise_variance)))

    @classmethod
    def default(cls, dim, **kw):
        """Unit lengthscales (the usual library default)."""
        return cls.create(np.ones(dim), **kw)

    @property
    def dim(self) -> int:
        return self.log_lengthscales.size

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def outputscale(self) -> float:
        return float(np.exp(self.log_outputscale))

    @property
    def noise_variance(self) -> float:
        return float(np.exp(self.log_noise))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_lengthscales,
                               [self.log_outputscale, self.mean_const, self.log_noise]])

    @classmethod
    def from_vector(cls, v) -> "KernelHyperparams":
        v = np.asarray(v, dtype=float)
        return cls(v[:-3].copy(), float(v[-3]), float(v[-2]), float(v[-1]))

    def replace(self, **changes) -> "KernelHyperparams":
        """Return a copy with natural-scale fields replaced."""
        ls = changes.pop("lengthscales", self.lengthscales)
        out = changes.pop("outputscale", self.outputscale)
        mean = changes.pop("mean_const", self.mean_const)
        noise = changes.pop("noise_variance", self.noise_variance)
        if changes:
            raise TypeError(f"unknown fields {sorted(changes)}")
        return KernelHyperparams.create(ls, out, mean, noise)

    def __eq__(self, other):
        if not isinstance(other, KernelHyperparams):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())

    def __hash__(self):
        return hash(self.to_vector().tobytes())


def scaled_sqdist(X, X2, lengthscales):
    """Squared ARD distances, clipped at zero.

    Leading batch dimensions broadcast: ``X`` is ``(..., n, d)``, ``X2`` is
    ``(..., m, d)``.
    """
    A = X / lengthscales
    B = X2 / lengthscales
    a2 = np.sum(A * A, axis=-1)[..., :, None]
    b2 = np.sum(B * B, axis=-1)[..., None, :]
    d2 = a2 + b2 - 2.0 * (A @ np.swapaxes(B, -1, -2))
    return np.maximum(d2, 0.0)


def matern52_ard(X, X2, params: KernelHyperparams) -> np.ndarray:
    """Scaled Matern-5/2 kernel with one lengthscale per input dimension.

    Parameters
    ----------
    X : array of shape (..., n, d)
    X2 : array of shape (..., m, d)
    params : KernelHyperparams

    Returns
    -------
    K : array of shape (..., n, m)
    """
    X = np.asarray(X, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    if X.ndim < 2 or X2.ndim < 2:
        raise ValueError("inputs must be at least 2-D (n, d)")
    d = params.dim
    if X.shape[-1] != d or X2.shape[-1] != d:
        raise ValueError(f"input dimension mismatch: expected {d}, got "
                         f"{X.shape[-1]} and {X2.shape[-1]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(X2))):
        raise ValueError("kernel inputs must be finite")
    r = np.sqrt(scaled_sqdist(X, X2, params.lengthscales))
    sr = SQRT5 * r
    K = params.outputscale * (1.0 + sr + sr * sr / 3.0) * np.exp(-sr)
    if X2 is X:
        K = 0.5 * (K + np.swapaxes(K, -1, -2))
    return K


def kernel_diag(X, params: KernelHyperparams) -> np.ndarray:
    """Diagonal of ``matern52_ard(X, X)`` without forming the matrix."""
    X = np.asarray(X, dtype=float)
    return np.full(X.shape[:-1], params.outputscale)


def matern52_vjp(X, X2, params: KernelHyperparams, G):
    """Contract ``G`` (shape ``(n, m)``) with derivatives of ``matern52_ard(X, X2)``.

    Returns ``(dX, dX2, d_log_lengthscales, d_log_outputscale)``, the
    gradients of ``sum(G * K)``. Uses
    ``dk/dx = -(5/3) s e^{-sqrt5 r} (1 + sqrt5 r) (x - x') / l^2``,
    which is finite at ``r = 0``.
    """
    X = np.asarray(X, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    ls2 = params.lengthscales ** 2
    diff = X[:, None, :] - X2[None, :, :]
    sr = SQRT5 * np.sqrt(np.maximum(np.sum(diff * diff / ls2, axis=-1), 0.0))
    e = np.exp(-sr)
    K = params.outputscale * (1.0 + sr + sr * sr / 3.0) * e
    Gg = G * (5.0 / 3.0) * params.outputscale * e * (1.0 + sr)
    W = Gg[..., None] * diff / ls2
    dX = -np.sum(W, axis=1)
    dX2 = np.sum(W, axis=0)
    d_log_ls = np.einsum("ij,ijk->k", Gg, diff * diff) / ls2
    return dX, dX2, d_log_ls, float(np.sum(G * K))

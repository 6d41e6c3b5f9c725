"""Block-diagonal observation-noise covariances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import chol_solve, cholesky_with_jitter, chol_logdet


@dataclass(frozen=True)
class HomoskedasticBlock:
    variance: float
    size: int

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("noise variance must be positive")

    @property
    def batch_shape(self):
        return ()

    def dense(self):
        return self.variance * np.eye(self.size)


@dataclass(frozen=True)
class DenseBlock:
    """A full ``(..., k, k)`` covariance block; leading axes are batch axes."""

    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim < 2 or cov.shape[-1] != cov.shape[-2]:
            raise ValueError("dense noise block must be square")
        if np.max(np.abs(cov - np.swapaxes(cov, -1, -2)), initial=0.0) > 1e-8 * max(np.max(np.abs(cov), initial=0.0), 1e-300):
            raise ValueError("dense noise block must be symmetric")
        object.__setattr__(self, "cov", cov)

    @property
    def size(self):
        return self.cov.shape[-1]

    @property
    def batch_shape(self):
        return self.cov.shape[:-2]

    def dense(self):
        return self.cov


@dataclass(frozen=True)
class NoiseModel:
    """Block-diagonal likelihood covariance.

    Blocks are either homoskedastic (``variance * I``) or dense PSD; dense
    blocks may carry leading batch axes, e.g. one surrogate noise per
    fantasy sample.
    """

    blocks: tuple = ()

    @classmethod
    def homoskedastic(cls, variance, n):
        return cls((HomoskedasticBlock(float(variance), int(n)),)) if n else cls()

    @classmethod
    def diagonal(cls, variances):
        v = np.asarray(variances, dtype=float)
        if v.shape[-1] == 0:
            return cls()
        if np.any(v <= 0):
            raise ValueError("noise variances must be positive")
        return cls((DenseBlock(v[..., :, None] * np.eye(v.shape[-1])),))

    @classmethod
    def dense(cls, cov):
        cov = np.asarray(cov, dtype=float)
        return cls((DenseBlock(cov),)) if cov.shape[-1] else cls()

    def concat(self, other: "NoiseModel") -> "NoiseModel":
        return NoiseModel(tuple(self.blocks) + tuple(other.blocks))

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def batch_shape(self):
        return np.broadcast_shapes(*(b.batch_shape for b in self.blocks)) if self.blocks else ()

    @property
    def is_homoskedastic(self) -> bool:
        return all(isinstance(b, HomoskedasticBlock) for b in self.blocks) and \
            len({b.variance for b in self.blocks}) <= 1

    def slices(self):
        start = 0
        for b in self.blocks:
            yield b, slice(start, start + b.size)
            start += b.size

    def to_dense(self) -> np.ndarray:
        n = self.size
        out = np.zeros(self.batch_shape + (n, n))
        for b, sl in self.slices():
            out[..., sl, sl] = b.dense()
        return out

    def diag(self) -> np.ndarray:
        return np.diagonal(self.to_dense(), axis1=-2, axis2=-1)

    def solve(self, B) -> np.ndarray:
        """``Sigma^{-1} B`` computed block by block; ``B`` is ``(..., n, k)``."""
        B = np.asarray(B, dtype=float)
        shape = np.broadcast_shapes(self.batch_shape, B.shape[:-2]) + B.shape[-2:]
        out = np.empty(shape)
        for b, sl in self.slices():
            if isinstance(b, HomoskedasticBlock):
                out[..., sl, :] = B[..., sl, :] / b.variance
            else:
                L = cholesky_with_jitter(b.cov).L
                out[..., sl, :] = chol_solve(L, B[..., sl, :])
        return out

    def solve_vec(self, b) -> np.ndarray:
        return self.solve(np.asarray(b, dtype=float)[..., None])[..., 0]

    def logdet(self):
        total = 0.0
        for b, _ in self.slices():
            if isinstance(b, HomoskedasticBlock):
                total = total + b.size * np.log(b.variance)
            else:
                total = total + chol_logdet(cholesky_with_jitter(b.cov).L)
        return total

    def inv_sqrt(self) -> np.ndarray:
        """Symmetric ``Sigma^{-1/2}`` as a dense matrix (unbatched only)."""
        if self.batch_shape:
            raise ValueError("inv_sqrt needs an unbatched noise model")
        n = self.size
        out = np.zeros((n, n))
        for b, sl in self.slices():
            if isinstance(b, HomoskedasticBlock):
                out[sl, sl] = np.eye(b.size) / np.sqrt(b.variance)
            else:
                w, E = np.linalg.eigh(b.cov)
                w = np.maximum(w, 1e-300)
                out[sl, sl] = (E / np.sqrt(w)) @ E.T
        return out


def as_noise(noise, n, params) -> NoiseModel:
    """Coerce ``None``, a scalar, a variance vector or a NoiseModel."""
    if noise is None:
        noise = NoiseModel.homoskedastic(params.noise_variance, n)
    elif not isinstance(noise, NoiseModel):
        arr = np.asarray(noise, dtype=float)
        if arr.ndim == 0:
            noise = NoiseModel.homoskedastic(float(arr), n)
        elif arr.ndim >= 2 and arr.shape[-1] == arr.shape[-2] == n and n > 1:
            noise = NoiseModel.dense(arr)
        else:
            noise = NoiseModel.diagonal(arr)
    if noise.size != n:
        raise ValueError(f"noise model has size {noise.size}, expected {n}")
    return noise

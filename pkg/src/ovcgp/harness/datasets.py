"""Synthetic data generators and CSV ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..kernels import KernelHyperparams, matern52_ard
from ..linalg import cholesky_with_jitter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    trials: np.ndarray | None = None
    f: np.ndarray | None = None  # noiseless latent values when known
    dropped: int = 0

    def __len__(self):
        return self.X.shape[0]


def sine_function(x):
    x = np.asarray(x, dtype=float)
    return np.sin(2.0 * np.abs(x) + 0.5 * x ** 2)


def sine_data(n: int, seed: int, noise_std: float = 0.1, low: float = -3.0,
              high: float = 3.0, ordered: bool = False) -> Dataset:
    """Noisy ``sin(2|x| + x^2 / 2)``; ``ordered=True`` gives a time-series stream."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, n)
    if ordered:
        x = np.sort(x)
    f = sine_function(x)
    return Dataset(x[:, None], f + noise_std * rng.standard_normal(n), f=f)


def friedman_data(n: int, seed: int, noise_std: float = 0.1) -> Dataset:
    """Smooth 3-d regression surface on the unit cube."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (n, 3))
    f = np.sin(np.pi * X[:, 0] * X[:, 1]) + 2.0 * (X[:, 2] - 0.5) ** 2 + 0.5 * np.cos(4 * X[:, 0])
    return Dataset(X, f + noise_std * rng.standard_normal(n), f=f)


def banana_data(n: int, seed: int, noise: float = 0.25) -> Dataset:
    """Two interleaved crescents with 0/1 labels, scaled to ``[0, 1]^2``."""
    from sklearn.datasets import make_moons
    X, y = make_moons(n, noise=noise, random_state=seed)
    X = (X - np.array([-1.5, -1.0])) / np.array([4.0, 2.5])
    return Dataset(np.clip(X, 0.0, 1.0), y.astype(float))


@dataclass(frozen=True)
class SpatialDataset:
    """Sites on a regular grid with Binomial prevalence surveys."""

    X: np.ndarray
    latent: np.ndarray
    prevalence: np.ndarray
    trials: np.ndarray
    y: np.ndarray
    tau: float
    hotspot: np.ndarray = field(repr=False)


def generate_spatial_prevalence(grid_size: int = 20, seed: int = 0, tau: float = 0.2,
                                lengthscale: float = 0.15, outputscale: float = 1.5,
                                mean: float = -1.5) -> SpatialDataset:
    """Latent GP field on a ``grid_size x grid_size`` grid through a logistic link.

    Populations are log-uniform on ``[50, 5000]``; counts are Binomial
    draws; hotspots are sites whose prevalence exceeds ``tau``.
    """
    if grid_size < 20:
        raise ValueError("grid must be at least 20 x 20")
    rng = np.random.default_rng(seed)
    g = (np.arange(grid_size) + 0.5) / grid_size
    X = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    prm = KernelHyperparams.create([lengthscale, lengthscale], outputscale, mean)
    L = cholesky_with_jitter(matern52_ard(X, X, prm)).L
    latent = mean + L @ rng.standard_normal(X.shape[0])
    r = expit(latent)
    trials = np.floor(np.exp(rng.uniform(np.log(50.0), np.log(5000.0), X.shape[0])))
    y = rng.binomial(trials.astype(np.int64), r).astype(float)
    return SpatialDataset(X, latent, r, trials, y, tau, r > tau)


@dataclass(frozen=True)
class CSVSchema:
    features: tuple
    target: str
    trials: str | None = None


def ingest_csv(path, schema: CSVSchema) -> Dataset:
    """Read a CSV with a header row; rows with non-finite values are dropped.

    Row order is preserved so the result can be streamed.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration as exc:
            raise ValueError(f"{path}: empty file") from exc
        cols = list(schema.features) + [schema.target] + ([schema.trials] if schema.trials else [])
        missing = [c for c in cols if c not in header]
        if missing:
            raise ValueError(f"{path}: header lacks columns {missing}")
        idx = [header.index(c) for c in cols]
        rows, dropped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(row[i]) for i in idx]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not np.all(np.isfinite(vals)):
                dropped += 1
                continue
            rows.append(vals)
    if dropped:
        log.warning("%s: dropped %d rows with non-finite values", path, dropped)
    arr = np.array(rows, dtype=float).reshape(-1, len(cols))
    k = len(schema.features)
    trials = arr[:, k + 1] if schema.trials else None
    return Dataset(arr[:, :k], arr[:, k], trials, dropped=dropped)


def export_csv(path, data: Dataset, schema: CSVSchema):
    """Write ``data`` with 17 significant digits so :func:`ingest_csv` is exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(schema.features) + [schema.target] + ([schema.trials] if schema.trials else [])
        w.writerow(cols)
        for i in range(len(data)):
            vals = list(data.X[i]) + [data.y[i]] + ([data.trials[i]] if schema.trials else [])
            w.writerow(["%.17g" % v for v in vals])

"""Synthetic benchmark objectives (maximisation convention)."""

from __future__ import annotations

import numpy as np

HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_A = np.array([
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
])
HARTMANN6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])
HARTMANN6_ARGMAX = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])
HARTMANN6_MAX = 3.32237

BRANIN_BOUNDS = np.array([[-5.0, 0.0], [10.0, 15.0]])
BRANIN_MIN = 0.397887

CONSTRAINT_LIMIT = 3.0


def _check_unit(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"expected {d}-dimensional inputs")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("inputs must lie in the unit cube")
    return x


def hartmann6(x) -> np.ndarray:
    """Negated Hartmann-6 (maximum 3.32237) on ``[0, 1]^6``."""
    x = _check_unit(x, 6)
    inner = np.sum(HARTMANN6_A * (x[..., None, :] - HARTMANN6_P) ** 2, axis=-1)
    return np.sum(HARTMANN6_ALPHA * np.exp(-inner), axis=-1)


def l1_constraint(x) -> np.ndarray:
    return np.sum(np.abs(np.asarray(x, dtype=float)), axis=-1)


def objective_hartmann6_constrained(x):
    """``(value, feasible)`` with feasibility ``||x||_1 <= 3`` (boundary included)."""
    x = _check_unit(x, 6)
    return hartmann6(x), l1_constraint(x) <= CONSTRAINT_LIMIT


def objective_poisson_hartmann6(x, rng: np.random.Generator):
    """Poisson count with rate ``exp(hartmann6(x))``."""
    return np.asarray(rng.poisson(np.exp(hartmann6(x))), dtype=float)


def branin(x_unit) -> np.ndarray:
    """Branin on the unit square (rescaled to its usual domain); minimum 0.397887."""
    u = _check_unit(x_unit, 2)
    x = BRANIN_BOUNDS[0] + u * (BRANIN_BOUNDS[1] - BRANIN_BOUNDS[0])
    x1, x2 = x[..., 0], x[..., 1]
    b = 5.1 / (4 * np.pi ** 2)
    c = 5 / np.pi
    t = 1 / (8 * np.pi)
    return (x2 - b * x1 ** 2 + c * x1 - 6) ** 2 + 10 * (1 - t) * np.cos(x1) + 10


def bimodal_1d(x) -> np.ndarray:
    """Two-peaked toy function on ``[0, 1]`` used for the look-ahead demo."""
    x = np.asarray(x, dtype=float)[..., 0]
    return np.exp(-((x - 0.2) ** 2) / 0.005) + 0.8 * np.exp(-((x - 0.75) ** 2) / 0.01)

"""Finite-difference gradients, Adam ascent and hyperpriors."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import gammaln

from .errors import NumericalError

log = logging.getLogger(__name__)

# (concentration, rate) pairs
LENGTHSCALE_PRIOR = (3.0, 6.0)
OUTPUTSCALE_PRIOR = (2.0, 0.15)


def gamma_logpdf(x, concentration, rate):
    x = np.asarray(x, dtype=float)
    return (concentration * np.log(rate) - gammaln(concentration)
            + (concentration - 1.0) * np.log(x) - rate * x)


def hyperprior_logpdf(params) -> float:
    """Gamma(3, 6) on every lengthscale and Gamma(2, 0.15) on the outputscale."""
    return float(np.sum(gamma_logpdf(params.lengthscales, *LENGTHSCALE_PRIOR))
                 + gamma_logpdf(params.outputscale, *OUTPUTSCALE_PRIOR))


def hyperprior_grad(params) -> np.ndarray:
    """Gradient of :func:`hyperprior_logpdf` in ``to_vector`` (log) coordinates."""
    a, b = LENGTHSCALE_PRIOR
    g_ls = (a - 1.0) - b * params.lengthscales
    a, b = OUTPUTSCALE_PRIOR
    return np.concatenate([g_ls, [(a - 1.0) - b * params.outputscale, 0.0, 0.0]])


def fd_gradient(f, v, rel_step=1e-4, mask=None):
    """Central-difference gradient of a scalar function."""
    v = np.asarray(v, dtype=float)
    g = np.zeros_like(v)
    idx = np.flatnonzero(np.ones(v.size, bool) if mask is None else mask)
    for i in idx:
        h = rel_step * max(1.0, abs(v[i]))
        vp = v.copy()
        vm = v.copy()
        vp[i] += h
        vm[i] -= h
        g[i] = (f(vp) - f(vm)) / (2.0 * h)
    return g


def adam_ascent(f, v0, steps=100, lr=0.1, lower=None, upper=None, mask=None,
                betas=(0.9, 0.999), eps=1e-8, rel_step=1e-4, grad=None,
                patience=10, tol=1e-6, keep_best=True):
    """Maximise ``f`` with Adam and return the best point visited.

    With ``keep_best=False`` the last finite iterate is returned instead,
    which mimics plain stochastic-optimiser training loops.

    ``grad`` defaults to central finite differences. Iteration stops early
    when an exponential moving average of the objective stalls for
    ``patience`` consecutive steps.
    """
    v = np.array(v0, dtype=float)
    lower = np.full(v.size, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full(v.size, np.inf) if upper is None else np.asarray(upper, float)
    v = np.clip(v, lower, upper)
    grad = grad or (lambda x: fd_gradient(f, x, rel_step, mask))
    m = np.zeros_like(v)
    s = np.zeros_like(v)
    best_v, best_f = v.copy(), f(v)
    if not np.isfinite(best_f):
        raise NumericalError("objective is not finite at the starting point")
    ema = best_f
    last_v = v.copy()
    stall = 0
    for t in range(1, steps + 1):
        g = grad(v)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient at step %d; stopping", t)
            break
        m = betas[0] * m + (1 - betas[0]) * g
        s = betas[1] * s + (1 - betas[1]) * g * g
        mhat = m / (1 - betas[0] ** t)
        shat = s / (1 - betas[1] ** t)
        v = np.clip(v + lr * mhat / (np.sqrt(shat) + eps), lower, upper)
        fv = f(v)
        if not np.isfinite(fv):
            log.warning("non-finite objective at step %d; stopping", t)
            break
        last_v = v.copy()
        if fv > best_f:
            best_v, best_f = v.copy(), fv
        new_ema = 0.9 * ema + 0.1 * fv
        stall = stall + 1 if abs(new_ema - ema) < tol * (1.0 + abs(new_ema)) else 0
        ema = new_ema
        if stall >= patience:
            break
    return best_v if keep_best else last_v

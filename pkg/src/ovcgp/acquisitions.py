"""Monte Carlo acquisition functions built on fantasy models.

Every acquisition accepts query batches with leading batch axes,
``X_query`` of shape ``(..., q, d)``, and returns values of shape ``(...)``.
That keeps finite-difference gradients to a single vectorised call.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, ndtr, ndtri
from scipy.stats import qmc

from .errors import NotPositiveDefiniteError, NumericalError
from .kernels import matern52_ard
from .likelihoods import LikelihoodSpec, newton_map
from .linalg import cholesky_with_jitter
from .models import condition, posterior
from .noise import NoiseModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MCSettings:
    num_samples: int = 256
    use_low_discrepancy: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass(frozen=True)
class LTSConfig:
    horizon: int = 3
    paths: int = 4
    candidates_per_step: int = 256
    q: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 0 or self.paths < 1 or self.q < 1:
            raise ValueError("need horizon >= 0, paths >= 1 and q >= 1")
        if self.q > self.candidates_per_step:
            raise ValueError("q cannot exceed the candidate count")


# ---------------------------------------------------------------- sampling

def sobol_points(n: int, bounds, seed) -> np.ndarray:
    """``n`` scrambled Sobol points inside ``bounds`` (shape ``(2, d)``)."""
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[1]
    eng = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two draws
        u = eng.random(n)
    return bounds[0] + u * (bounds[1] - bounds[0])


def normal_base_samples(n: int, dim: int, mc: MCSettings, offset: int = 0) -> np.ndarray:
    """``(n, dim)`` standard-normal base samples, QMC when requested."""
    try:
        return _cached_base_samples(n, dim, mc.use_low_discrepancy, mc.seed, offset).copy()
    except TypeError:  # unhashable seed
        return _base_samples(n, dim, mc.use_low_discrepancy, mc.seed, offset)


@lru_cache(maxsize=256)
def _cached_base_samples(n, dim, qmc_, seed, offset):
    # building a scrambled Sobol engine dominates the cost of small draws
    return _base_samples(n, dim, qmc_, seed, offset)


def _base_samples(n, dim, qmc_, seed, offset):
    seed = np.random.SeedSequence([seed, offset])
    if qmc_ and dim <= 21201:
        eng = qmc.Sobol(dim, scramble=True, seed=np.random.default_rng(seed))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            u = eng.random(n)
        return ndtri(np.clip(u, 1e-10, 1 - 1e-10))
    return np.random.default_rng(seed).standard_normal((n, dim))


def mvn_root(cov) -> np.ndarray:
    """A (batched) factor ``L`` with ``L L^T = cov``; falls back to eigh."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    try:
        return cholesky_with_jitter(cov, max_tries=3).L
    except NotPositiveDefiniteError:
        w, E = np.linalg.eigh(cov)
        return E * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def joint_samples(post, base) -> np.ndarray:
    """Samples ``(..., N, m)`` from a posterior with mean ``(..., m)``."""
    L = mvn_root(post.covariance)
    return post.mean[..., None, :] + base @ np.swapaxes(L, -1, -2)


# ---------------------------------------------------------------- feasibility

@dataclass(frozen=True)
class Feasibility:
    """Outcome constraint ``c(x) <= threshold`` modelled by a separate GP."""

    model: object
    threshold: float
    floor: float  # objective value assigned to infeasible points

    def probability(self, X):
        post = posterior(self.model, X, full_cov=False)
        return ndtr((self.threshold - post.mean) / np.maximum(post.std, 1e-12))

    def weight(self, values, X):
        return (values - self.floor) * self.probability(X) + self.floor


def _smooth_feasible(c, threshold, eta=1e-3):
    return expit((threshold - c) / eta)


# ---------------------------------------------------------------- EI / qNEI

def expected_improvement(model, X, best_f: float) -> np.ndarray:
    """Analytic EI at single points, ``X`` is ``(..., 1, d)`` or ``(..., d)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim >= 2 and X.shape[-2] == 1:
        X = X[..., 0, :]
    post = posterior(model, X[..., None, :], full_cov=False)
    mu, sd = post.mean[..., 0], post.std[..., 0]
    sd = np.maximum(sd, 1e-12)
    z = (mu - best_f) / sd
    return sd * (z * ndtr(z) + np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi))


def qnei(model, X_query, X_baseline, mc: MCSettings = MCSettings(),
         feasibility: Feasibility | None = None) -> np.ndarray:
    """Batch noisy expected improvement.

    ``E[max(max f(X_query) - max f(X_baseline), 0)]`` under joint posterior
    samples of query and baseline points. With ``feasibility`` the
    constraint GP is sampled too (independent base samples) and infeasible
    values are replaced by ``feasibility.floor`` through a steep sigmoid.
    """
    X_query = np.asarray(X_query, dtype=float)
    X_baseline = np.asarray(X_baseline, dtype=float)
    if X_baseline.shape[-2] == 0:
        raise ValueError("qNEI needs at least one baseline point")
    q = X_query.shape[-2]
    batch = X_query.shape[:-2]
    Xb = np.broadcast_to(X_baseline, batch + X_baseline.shape[-2:])
    X = np.concatenate([X_query, Xb], axis=-2)
    m = X.shape[-2]
    base = normal_base_samples(mc.num_samples, m, mc)
    f = joint_samples(posterior(model, X), base)
    if feasibility is not None:
        cbase = normal_base_samples(mc.num_samples, m, mc, offset=1)
        c = joint_samples(posterior(feasibility.model, X), cbase)
        s = _smooth_feasible(c, feasibility.threshold)
        f = (f - feasibility.floor) * s + feasibility.floor
    imp = np.max(f[..., :q], axis=-1) - np.max(f[..., q:], axis=-1)
    return np.mean(np.maximum(imp, 0.0), axis=-1)


def prune_baseline(model, X_baseline, mc: MCSettings = MCSettings(),
                   feasibility: Feasibility | None = None):
    """Baseline points that are the sampled maximiser in at least one draw.

    Points that never attain the maximum cannot change ``max f(X_baseline)``
    for those draws, so dropping them leaves qNEI unchanged up to Monte
    Carlo error while shrinking the joint covariance it factorises.
    """
    X_baseline = np.asarray(X_baseline, dtype=float)
    n = X_baseline.shape[0]
    if n <= 1:
        return X_baseline
    base = normal_base_samples(mc.num_samples, n, mc, offset=5)
    f = joint_samples(posterior(model, X_baseline), base)
    if feasibility is not None:
        cbase = normal_base_samples(mc.num_samples, n, mc, offset=6)
        c = joint_samples(posterior(feasibility.model, X_baseline), cbase)
        s = _smooth_feasible(c, feasibility.threshold)
        f = (f - feasibility.floor) * s + feasibility.floor
    return X_baseline[np.unique(np.argmax(f, axis=-1))]


# ---------------------------------------------------------------- qKG

class QKnowledgeGradient:
    """One-shot batch knowledge gradient.

    ``F = mc.num_samples`` fantasy observations are drawn at the query batch
    and the model is conditioned on each, giving a batch of ``F`` fantasy
    models. Fantasy ``f`` is scored by its posterior mean at its own
    solution point ``x'_f``; the average minus the current maximum of the
    posterior mean over a fixed reference set is the acquisition value.

    Parameters
    ----------
    model : ExactGPModel or VariationalState
    X_ref : (R, d) reference set for the current-max term
    fantasy_noise : float, callable or None
        Observation noise variance attached to fantasies. A callable maps
        the posterior mean at the query points to variances (used for
        Laplace surrogates of non-Gaussian likelihoods). Defaults to the
        model's noise variance.
    feasibility : Feasibility, optional
    """

    def __init__(self, model, X_ref, mc: MCSettings = MCSettings(64), fantasy_noise=None,
                 feasibility: Feasibility | None = None):
        self.model = model
        self.mc = mc
        self.X_ref = np.asarray(X_ref, dtype=float)
        self.fantasy_noise = model.params.noise_variance if fantasy_noise is None \
            else fantasy_noise
        self.feasibility = feasibility
        self._base = None
        self._current = None

    @property
    def F(self) -> int:
        return self.mc.num_samples

    def _value(self, mean, X):
        return mean if self.feasibility is None else self.feasibility.weight(mean, X)

    @property
    def current_max(self) -> float:
        if self._current is None:
            mu = posterior(self.model, self.X_ref, full_cov=False).mean
            self._current = float(np.max(self._value(mu, self.X_ref)))
        return self._current

    def _noise(self, post):
        if callable(self.fantasy_noise):
            return np.asarray(self.fantasy_noise(post.mean), dtype=float)
        return np.full(post.mean.shape, float(self.fantasy_noise))

    def fantasy_models(self, X_query):
        """Fantasy ensemble with batch shape ``(..., F)``."""
        X_query = np.asarray(X_query, dtype=float)
        q = X_query.shape[-2]
        post = posterior(self.model, X_query)
        nv = self._noise(post)
        cov = post.covariance + nv[..., :, None] * np.eye(q)
        if self._base is None or self._base.shape[1] != q:
            self._base = normal_base_samples(self.F, q, self.mc)
        L = mvn_root(cov)
        y = post.mean[..., None, :] + self._base @ np.swapaxes(L, -1, -2)
        noise = NoiseModel.diagonal(nv[..., None, :])
        return condition(self.model, X_query[..., None, :, :], y, noise)

    def terms(self, fm, X_fant):
        """Per-fantasy values at paired solutions, ``X_fant`` is ``(..., F, d)``."""
        Xs = X_fant[..., :, None, :]
        mu = posterior(fm, Xs, full_cov=False).mean[..., 0]
        return self._value(mu, X_fant)

    def split(self, X):
        X = np.asarray(X, dtype=float)
        return X[..., :-self.F, :], X[..., -self.F:, :]

    def __call__(self, X):
        """Value of stacked ``[X_query; X_fant]`` of shape ``(..., q + F, d)``."""
        Xq, Xf = self.split(X)
        return np.mean(self.terms(self.fantasy_models(Xq), Xf), axis=-1) - self.current_max

    def discrete(self, X_query, X_cand=None):
        """KG with the inner maximum taken over a finite set.

        Returns ``(value, argmax)`` where ``argmax[..., f]`` indexes the best
        candidate for fantasy ``f``.
        """
        X_cand = self.X_ref if X_cand is None else np.asarray(X_cand, dtype=float)
        fm = self.fantasy_models(X_query)
        mu = posterior(fm, X_cand, full_cov=False).mean
        vals = self._value(mu, X_cand)
        return np.mean(np.max(vals, axis=-1), axis=-1) - self.current_max, \
            np.argmax(vals, axis=-1)

    def gradient(self, X, bounds, rel_step=1e-5):
        """Central-difference gradient of a single ``(q + F, d)`` point.

        Query coordinates are perturbed one at a time (in one batch). Each
        fantasy term depends only on its own solution point, so coordinate
        ``j`` of all solutions is perturbed at once.
        """
        X = np.asarray(X, dtype=float)
        Xq, Xf = self.split(X)
        q, d = Xq.shape
        h = rel_step * (bounds[1] - bounds[0])
        grad = np.zeros_like(X)
        pert = []
        for i in range(q):
            for j in range(d):
                for sgn in (1.0, -1.0):
                    Z = Xq.copy()
                    Z[i, j] = np.clip(Z[i, j] + sgn * h[j], bounds[0, j], bounds[1, j])
                    pert.append(Z)
        pert = np.stack(pert)
        fm = self.fantasy_models(pert)
        vals = np.mean(self.terms(fm, np.broadcast_to(Xf, (len(pert),) + Xf.shape)), axis=-1)
        k = 0
        for i in range(q):
            for j in range(d):
                dx = pert[k, i, j] - pert[k + 1, i, j]
                grad[i, j] = (vals[k] - vals[k + 1]) / dx if dx else 0.0
                k += 2
        fm0 = self.fantasy_models(Xq)
        for j in range(d):
            Fp, Fm = Xf.copy(), Xf.copy()
            Fp[:, j] = np.clip(Fp[:, j] + h[j], bounds[0, j], bounds[1, j])
            Fm[:, j] = np.clip(Fm[:, j] - h[j], bounds[0, j], bounds[1, j])
            tp, tm = self.terms(fm0, Fp), self.terms(fm0, Fm)
            dx = Fp[:, j] - Fm[:, j]
            grad[q:, j] = np.where(dx > 0, (tp - tm) / np.where(dx > 0, dx, 1.0), 0.0) / self.F
        return grad


def qkg_one_shot(model, X_query, X_fantasy_solutions, mc: MCSettings = MCSettings(64),
                 X_ref=None, **kw) -> np.ndarray:
    """Functional form of :class:`QKnowledgeGradient`.

    ``X_ref`` defaults to the fantasy solutions themselves.
    """
    X_query = np.asarray(X_query, dtype=float)
    X_fant = np.asarray(X_fantasy_solutions, dtype=float)
    if X_fant.shape[-2] != mc.num_samples:
        raise ValueError("need one fantasy solution per fantasy sample")
    ref = X_fant.reshape(-1, X_fant.shape[-1]) if X_ref is None else X_ref
    acq = QKnowledgeGradient(model, ref, mc, **kw)
    return acq(np.concatenate([X_query, X_fant], axis=-2))


def qkg_discrete(model, X_query, X_cand, mc: MCSettings = MCSettings(64), **kw):
    """Knowledge gradient with the inner maximisation over ``X_cand``."""
    acq = QKnowledgeGradient(model, X_cand, mc, **kw)
    return acq.discrete(X_query)[0]


# ---------------------------------------------------------------- NIPV

def nipv(model, X_query, integration_grid, noise=None) -> np.ndarray:
    """Negative integrated posterior variance after observing ``X_query``.

    The conditioned variance does not depend on the observed values, so
    one conditioning on zero targets suffices. ``noise`` is the observation
    noise of the query points (default: the model's noise variance).
    """
    grid = np.asarray(integration_grid, dtype=float)
    X_query = np.asarray(X_query, dtype=float)
    if X_query.shape[-2] == 0:
        return -np.mean(posterior(model, grid, full_cov=False).variance)
    y = np.zeros(X_query.shape[:-1])
    if noise is not None:
        noise = NoiseModel.diagonal(np.broadcast_to(noise, y.shape))
    fm = condition(model, X_query, y, noise)
    return -np.mean(posterior(fm, grid, full_cov=False).variance, axis=-1)


# ---------------------------------------------------------------- hotspots

def bernoulli_entropy(f):
    """Entropy of ``Bernoulli(sigmoid(f))`` in nats, stable for large ``|f|``."""
    p = expit(f)
    # H = log(1 + e^f) - f * sigmoid(f)
    return np.maximum(f, 0.0) + np.log1p(np.exp(-np.abs(f))) - f * p


def hotspot_entropy(model, X_eval, tau: float, K_samples: int = 16, seed: int = 0):
    """Per-point hotspot entropy ``E[1(f > logit tau) H(Bernoulli(sigmoid f))]``.

    Estimated from ``K_samples`` marginal posterior draws per point.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    post = posterior(model, X_eval, full_cov=False)
    z = normal_base_samples(K_samples, 1, MCSettings(K_samples, True, seed))[:, 0]
    f = post.mean[..., None] + post.std[..., None] * z
    thr = np.log(tau) - np.log1p(-tau)
    return np.mean((f > thr) * bernoulli_entropy(f), axis=-1)


def hotspot_acquisition(model, X_query, X_eval, tau: float, trial_counts,
                        K_inner: int = 16, K_outer: int = 16, seed: int = 0,
                        lik: LikelihoodSpec | None = None, before=None):
    """Change in total hotspot entropy over ``X_eval`` after querying ``X_query``.

    ``K_outer`` latent draws at the query points are pushed through Binomial
    sampling with ``trial_counts``; each fantasy batch is turned into a
    Laplace surrogate (prior kernel at the query points) and conditioned on.
    More negative values mean a larger expected entropy reduction.

    ``before`` may pass in ``hotspot_entropy(model, X_eval, tau, K_inner, seed)``
    when many candidates are scored against the same model.
    """
    X_query = np.atleast_2d(np.asarray(X_query, dtype=float))
    q = X_query.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    post = posterior(model, X_query)
    base = normal_base_samples(K_outer, q, MCSettings(K_outer, True, seed), offset=3)
    f = joint_samples(post, base)
    lik = lik or LikelihoodSpec.binomial(np.broadcast_to(trial_counts, (q,)))
    y = lik.sample(f, rng)
    prm = model.params
    K = matern52_ard(X_query, X_query, prm)
    sur = newton_map(K, y, lik, mean=prm.mean_const)
    fm = condition(model, X_query, sur.f_star, NoiseModel.diagonal(sur.noise))
    if before is None:
        before = hotspot_entropy(model, X_eval, tau, K_inner, seed)
    after = np.mean(hotspot_entropy(fm, X_eval, tau, K_inner, seed), axis=0)
    return float(np.sum(after - before))


# ---------------------------------------------------------------- Thompson sampling

def _seed_stream(seed, index):
    return np.random.SeedSequence(seed, spawn_key=(index,))


def _top_distinct(values, q):
    """Indices of the ``q`` best distinct candidates over ``(paths, N)`` values."""
    order = np.argsort(-values, axis=None, kind="stable")
    cand = np.unravel_index(order, values.shape)[-1]
    out = []
    for c in cand:
        if c not in out:
            out.append(int(c))
            if len(out) == q:
                break
    return np.array(out)


def thompson_top_q(model, bounds, n_candidates: int, q: int, seed: int = 0):
    """Standard Thompson sampling: one joint draw over a Sobol candidate set,
    returning its ``q`` largest candidates."""
    X = sobol_points(n_candidates, bounds, _seed_stream(seed, 0))
    z = np.random.default_rng(_seed_stream(seed, 1)).standard_normal((1, n_candidates))
    f = joint_samples(posterior(model, X), z)[0]
    return X[_top_distinct(f[None], q)]


def lts(model, bounds, config: LTSConfig, return_paths: bool = False):
    """Look-ahead Thompson sampling.

    ``config.paths`` coherent sample paths are rolled out for
    ``config.horizon`` steps: each path conditions on its own sampled
    maximiser before sampling again on a fresh candidate set. The final
    draw comes from the model conditioned jointly on each full path and the
    ``q`` best distinct candidates over all paths are returned. With
    ``horizon=0`` this is exactly :func:`thompson_top_q` under the same
    seed.
    """
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[1]
    N, ell, seed = config.candidates_per_step, config.paths, config.seed
    nv = model.params.noise_variance
    paths_X = np.zeros((ell, 0, d))
    paths_y = np.zeros((ell, 0))
    current = model
    for t in range(config.horizon):
        X = sobol_points(N, bounds, _seed_stream(seed, 2 + 2 * t))
        rng = np.random.default_rng(_seed_stream(seed, 3 + 2 * t))
        if t == 0:
            f = joint_samples(posterior(model, X), rng.standard_normal((1, N)))[0]
            idx = np.argsort(-f, kind="stable")[:ell]
            if idx.size < ell:
                raise ValueError("fewer candidates than paths")
            new_X, new_y = X[idx], f[idx]
        else:
            z = rng.standard_normal((paths_X.shape[0], 1, N))
            f = joint_samples(posterior(current, X), z)[:, 0, :]
            idx = np.argmax(f, axis=-1)
            new_X, new_y = X[idx], f[np.arange(f.shape[0]), idx]
        paths_X = np.concatenate([paths_X, new_X[:, None, :]], axis=1)
        paths_y = np.concatenate([paths_y, new_y[:, None]], axis=1)
        try:
            current = condition(current, new_X[:, None, :], new_y[:, None],
                                NoiseModel.diagonal(np.full((new_X.shape[0], 1), nv)))
        except NumericalError as exc:
            raise NumericalError(f"path conditioning failed at step {t}") from exc
    if config.horizon:
        keep = []
        for i in range(paths_X.shape[0]):
            try:
                condition(model, paths_X[i], paths_y[i])
                keep.append(i)
            except NumericalError:
                log.warning("dropping path %d: conditioning failed", i)
        if not keep:
            raise NumericalError("every look-ahead path failed to condition")
        paths_X, paths_y = paths_X[keep], paths_y[keep]
        end = condition(model, paths_X, paths_y,
                        NoiseModel.diagonal(np.full(paths_y.shape, nv)))
    else:
        end = model
    X = sobol_points(N, bounds, _seed_stream(seed, 0))
    n_paths = paths_X.shape[0] if config.horizon else 1
    z = np.random.default_rng(_seed_stream(seed, 1)).standard_normal((n_paths, N))
    if config.horizon:
        f = joint_samples(posterior(end, X), z[:, None, :])[:, 0, :]
    else:
        f = joint_samples(posterior(end, X), z)
    out = X[_top_distinct(f, config.q)]
    if return_paths:
        return out, {"paths_X": paths_X, "paths_y": paths_y, "model": end}
    return out


# ---------------------------------------------------------------- optimisation

def fd_batch_gradient(acq, x, bounds, rel_step=1e-5):
    """Central differences of ``acq`` at one ``(q, d)`` point in a single batched call."""
    q, d = x.shape
    h = rel_step * (bounds[1] - bounds[0])
    pert = np.repeat(x[None], 2 * q * d, axis=0)
    k = 0
    for i in range(q):
        for j in range(d):
            pert[k, i, j] = min(x[i, j] + h[j], bounds[1, j])
            pert[k + 1, i, j] = max(x[i, j] - h[j], bounds[0, j])
            k += 2
    vals = np.asarray(acq(pert), dtype=float)
    dx = pert[0::2][np.arange(q * d), np.repeat(np.arange(q), d), np.tile(np.arange(d), q)] \
        - pert[1::2][np.arange(q * d), np.repeat(np.arange(q), d), np.tile(np.arange(d), q)]
    g = np.where(dx > 0, (vals[0::2] - vals[1::2]) / np.where(dx > 0, dx, 1.0), 0.0)
    return g.reshape(q, d)


def _refine(value, grad, x0, bounds, maxiter):
    shape = x0.shape
    lo = np.broadcast_to(bounds[0], shape).ravel()
    hi = np.broadcast_to(bounds[1], shape).ravel()

    def fun(v):
        X = v.reshape(shape)
        return -float(value(X)), -grad(X).ravel()

    res = minimize(fun, x0.ravel(), jac=True, method="L-BFGS-B",
                   bounds=list(zip(lo, hi)), options={"maxiter": maxiter})
    return res.x.reshape(shape), -res.fun


def optimize_acquisition(acq, bounds, q: int = 1, restarts: int = 10, raw_samples: int = 512,
                         seed: int = 0, maxiter: int = 200, raw_batch: int = 256):
    """Multi-start L-BFGS-B maximisation of a batched acquisition.

    ``raw_samples`` Sobol batches are scored, the best ``restarts`` are
    refined with finite-difference gradients. Returns ``(X, value)`` with
    ``X`` of shape ``(q, d)``.
    """
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[1]
    raw = sobol_points(raw_samples * q, bounds, seed).reshape(raw_samples, q, d)
    scores = np.concatenate([np.asarray(acq(raw[i:i + raw_batch]), dtype=float)
                             for i in range(0, raw_samples, raw_batch)])
    order = np.argsort(-scores, kind="stable")[:restarts]
    best_x, best_v = raw[order[0]], float(scores[order[0]])
    n_fail = 0
    for i in order:
        try:
            x, v = _refine(lambda X: acq(X[None])[0],
                           lambda X: fd_batch_gradient(acq, X, bounds),
                           raw[i], bounds, maxiter)
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            n_fail += 1
            log.debug("restart failed: %s", exc)
            continue
        if np.isfinite(v) and v > best_v:
            best_x, best_v = x, v
    if n_fail == len(order):
        log.warning("all %d restarts failed; returning the best raw candidate", n_fail)
    return best_x, best_v


def optimize_qkg(acq: QKnowledgeGradient, bounds, q: int = 1, restarts: int = 10,
                 raw_samples: int = 512, seed: int = 0, maxiter: int = 200, chunk: int = 16):
    """Optimise one-shot qKG.

    Raw query batches are scored with the discrete KG over the reference
    set; its per-fantasy maximisers initialise the fantasy solutions. The
    best ``restarts`` are refined jointly over queries and solutions.
    """
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[1]
    raw = sobol_points(raw_samples * q, bounds, seed).reshape(raw_samples, q, d)
    scores, argm = [], []
    for i in range(0, raw_samples, chunk):
        v, a = acq.discrete(raw[i:i + chunk])
        scores.append(v)
        argm.append(a)
    scores = np.concatenate(scores)
    argm = np.concatenate(argm)
    order = np.argsort(-scores, kind="stable")[:restarts]
    best_x, best_v = raw[order[0]], -np.inf
    for i in order:
        x0 = np.concatenate([raw[i], acq.X_ref[argm[i]]], axis=0)
        try:
            x, v = _refine(lambda X: acq(X[None])[0], lambda X: acq.gradient(X, bounds),
                           x0, bounds, maxiter)
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            log.debug("qKG restart failed: %s", exc)
            continue
        if np.isfinite(v) and v > best_v:
            best_x, best_v = x[:q], v
    if not np.isfinite(best_v):
        log.warning("all qKG restarts failed; returning the best raw candidate")
        best_v = float(scores[order[0]])
    return best_x, best_v

"""Sparse variational GPs in canonical and whitened variational form.

A sparse GP over inducing locations ``Z`` is stored in one of two
equivalent parameterisations:

* canonical ``(c, C)`` with ``c = K_uv Sigma^{-1} (y - m)`` and
  ``C = K_uv Sigma^{-1} K_vu``; these add up across data batches;
* whitened variational ``(m_bar, S_bar)`` with ``m_u = L m_bar`` and
  ``S_u = L S_bar L^T`` where ``L = chol(K_uu)``.

Everything below works in whitened coordinates. With ``Ct = L^{-1} C L^{-T}``
and ``ct = L^{-1} c`` the optimal variational state is
``S_bar = (I + Ct)^{-1}`` and ``m_bar = S_bar ct``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefiniteError, NumericalError, StateError
from .exact import LOG2PI, PosteriorGaussian
from .kernels import KernelHyperparams, kernel_diag, matern52_ard, matern52_vjp
from .likelihoods import LikelihoodSpec, log_prob, newton_map
from .linalg import (chol_logdet, chol_solve, chol_solve_vec, cholesky_with_jitter, pivoted_cholesky,
                     tri_solve, tri_solve_vec)
from .noise import HomoskedasticBlock, NoiseModel, as_noise
from .optim import adam_ascent, hyperprior_grad, hyperprior_logpdf

log = logging.getLogger(__name__)

GH_NODES = 20
_MIN_GAP = 1e-8  # S_bar eigenvalues must stay below 1 - _MIN_GAP


@dataclass(frozen=True, eq=False)
class InducingSet:
    """Inducing locations, optionally with the pivots that selected them."""

    Z: np.ndarray
    pivots: np.ndarray | None = None
    residual_trace: float | None = None

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        if Z.shape[0] > 1:
            d2 = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=-1)
            d2[np.diag_indices_from(d2)] = np.inf
            if np.min(d2) < 1e-20:
                raise ValueError("inducing set contains duplicate rows")
        object.__setattr__(self, "Z", Z)

    def __array__(self, dtype=None, copy=None):
        return self.Z if dtype is None else self.Z.astype(dtype)

    def __len__(self):
        return self.Z.shape[0]


def _as_Z(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    return Z[:, None] if Z.ndim == 1 else Z


@dataclass(frozen=True, eq=False)
class CanonicalState:
    Z: np.ndarray
    params: KernelHyperparams
    c: np.ndarray
    C: np.ndarray

    @property
    def p(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True, eq=False)
class VariationalState:
    Z: np.ndarray
    params: KernelHyperparams
    m_bar: np.ndarray
    S_bar: np.ndarray

    @property
    def p(self) -> int:
        return self.Z.shape[0]

    @classmethod
    def prior(cls, Z, params):
        Z = _as_Z(Z)
        p = Z.shape[0]
        return cls(Z, params, np.zeros(p), np.eye(p))

    def kuu_chol(self):
        return kuu_cholesky(self.Z, self.params)

    def unwhitened(self):
        """``(m_u, S_u)`` in the original inducing coordinates."""
        L = self.kuu_chol()
        return L @ self.m_bar, L @ self.S_bar @ L.T


def kuu_cholesky(Z, params) -> np.ndarray:
    return cholesky_with_jitter(matern52_ard(Z, Z, params)).L


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _check_batch(X, y, d):
    X = np.asarray(X, dtype=float).reshape(-1, d) if np.size(X) == 0 else np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1) if np.size(y) == 0 else np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[-1]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[-1]}")
    return X, y


def canonical_from_data(X, y, noise, Z, params: KernelHyperparams) -> CanonicalState:
    """Sufficient statistics ``(c, C)`` of one batch for fixed ``Z`` and ``params``."""
    Z = _as_Z(Z)
    X, y = _check_batch(X, y, Z.shape[1])
    p = Z.shape[0]
    if X.shape[0] == 0:
        return CanonicalState(Z, params, np.zeros(p), np.zeros((p, p)))
    noise = as_noise(noise, X.shape[0], params)
    Kvu = matern52_ard(X, Z, params)
    SiKvu = noise.solve(Kvu)
    c = SiKvu.T @ (y - params.mean_const)
    C = _sym(Kvu.T @ SiKvu)
    return CanonicalState(Z, params, c, C)


def add_canonical(a: CanonicalState, b: CanonicalState) -> CanonicalState:
    """Sum of two batches' statistics (same ``Z`` and ``params``)."""
    return CanonicalState(a.Z, a.params, a.c + b.c, a.C + b.C)


def _whiten(L, c, C):
    ct = tri_solve_vec(L, c)
    Ct = tri_solve(L, tri_solve(L, C).T).T
    return ct, _sym(Ct)


def canonical_to_variational(state: CanonicalState) -> VariationalState:
    """Closed-form optimal variational state for the canonical statistics."""
    L = kuu_cholesky(state.Z, state.params)
    ct, Ct = _whiten(L, state.c, state.C)
    p = state.p
    try:
        M = cholesky_with_jitter(np.eye(p) + Ct).L
    except NotPositiveDefiniteError:
        # whitening through a near-singular K_uu can leave Ct slightly
        # indefinite; project it back onto the PSD cone
        lam, E = np.linalg.eigh(Ct)
        log.warning("whitened precision indefinite (min eigenvalue %.3g); clipping", lam.min())
        S_bar = _sym((E / (1.0 + np.clip(lam, 0.0, None))) @ E.T)
        return VariationalState(state.Z, state.params, S_bar @ ct, S_bar)
    Minv = tri_solve(M, np.eye(p))
    S_bar = _sym(Minv.T @ Minv)
    m_bar = Minv.T @ (Minv @ ct)
    return VariationalState(state.Z, state.params, m_bar, S_bar)


def whitened_precision(state: VariationalState, clip: bool = False):
    """Eigen-decomposition of ``S_bar`` and ``Ct = S_bar^{-1} - I``.

    Returns ``(s, E, ct_eig)`` where ``S_bar = E diag(s) E^T`` and
    ``Ct = E diag(ct_eig) E^T``. States with an eigenvalue of ``S_bar`` at or
    above ``1 - 1e-8`` imply a negative (or infinite) pseudo-noise and are
    rejected, unless ``clip`` is set, which maps them to zero precision.
    """
    s, E = np.linalg.eigh(_sym(state.S_bar))
    if s.min() <= 0:
        raise StateError(f"S_bar is not positive definite (min eigenvalue {s.min():.3g})")
    if not clip and s.max() >= 1.0 - _MIN_GAP:
        raise StateError(
            f"S_bar has eigenvalue {s.max():.12g} >= 1 - 1e-8: the variational "
            "state is at least as wide as the prior and has no pseudo-data form")
    ct_eig = np.clip(1.0 / s - 1.0, 0.0, None)
    return s, E, ct_eig


def variational_to_canonical(state: VariationalState, clip: bool = False) -> CanonicalState:
    """Recover ``(c, C)`` from a whitened variational state."""
    s, E, ct_eig = whitened_precision(state, clip)
    L = state.kuu_chol()
    ct = E @ ((E.T @ state.m_bar) / s)
    LE = L @ E
    C = _sym((LE * ct_eig) @ LE.T)
    return CanonicalState(state.Z, state.params, L @ ct, C)


def _as_variational(state) -> VariationalState:
    return canonical_to_variational(state) if isinstance(state, CanonicalState) else state


def sgpr_caches(state):
    """``(a, R)`` with ``a = K_uu^{-1} m_u`` and ``R R^T = K_uu^{-1}(K_uu - S_u)K_uu^{-1}``."""
    vs = _as_variational(state)
    L = vs.kuu_chol()
    p = vs.p
    s, E = np.linalg.eigh(_sym(vs.S_bar))
    root = E * np.sqrt(np.clip(1.0 - s, 0.0, None))  # (I - S_bar)^{1/2}
    a = tri_solve_vec(L, vs.m_bar, trans=True)
    R = tri_solve(L, root, trans=True) if p else root
    return a, R


def sgpr_predict(state, X_test, full_cov: bool = True) -> PosteriorGaussian:
    """Predictive distribution of latent values under a sparse state."""
    vs = _as_variational(state)
    X_test = _as_Z(X_test)
    p = vs.params
    a, R = sgpr_caches(vs)
    Kwu = matern52_ard(X_test, vs.Z, p)
    mean = p.mean_const + Kwu @ a
    V = Kwu @ R
    if full_cov:
        cov = _sym(matern52_ard(X_test, X_test, p) - V @ np.swapaxes(V, -1, -2))
        return PosteriorGaussian(mean, cov)
    return PosteriorGaussian(mean, variance=kernel_diag(X_test, p) - np.sum(V * V, axis=-1))


def _nystrom_trace(noise: NoiseModel, X, A, params):
    """``tr(Sigma^{-1} (K_vv - A^T A))`` evaluated block by block."""
    total = 0.0
    for blk, sl in noise.slices():
        Ab = A[:, sl]
        if isinstance(blk, HomoskedasticBlock):
            resid = np.sum(kernel_diag(X[sl], params)) - np.sum(Ab * Ab)
            total += resid / blk.variance
        else:
            D = matern52_ard(X[sl], X[sl], params) - Ab.T @ Ab
            total += np.trace(chol_solve(cholesky_with_jitter(blk.cov).L, D))
    return float(total)


def sgpr_collapsed_elbo(X, y, noise, Z, params: KernelHyperparams) -> float:
    """Collapsed (Titsias) evidence lower bound for Gaussian noise.

    ``log N(y | m, Q_vv + Sigma) - 1/2 tr(Sigma^{-1} (K_vv - Q_vv))`` with
    ``Q_vv = K_vu K_uu^{-1} K_uv``. Computed through the ``p x p`` system
    ``I + A Sigma^{-1} A^T`` with ``A = L^{-1} K_uv``.
    """
    Z = _as_Z(Z)
    X, y = _check_batch(X, y, Z.shape[1])
    n = X.shape[0]
    if n == 0:
        return 0.0
    noise = as_noise(noise, n, params)
    L = kuu_cholesky(Z, params)
    A = tri_solve(L, matern52_ard(Z, X, params))
    r = y - params.mean_const
    Sir = noise.solve_vec(r)
    SiAt = noise.solve(A.T)
    B = _sym(np.eye(Z.shape[0]) + A @ SiAt)
    LB = cholesky_with_jitter(B).L
    z = tri_solve_vec(LB, A @ Sir)
    quad = r @ Sir - z @ z
    logdet = noise.logdet() + chol_logdet(LB)
    trace = _nystrom_trace(noise, X, A, params)
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n * LOG2PI - 0.5 * trace)


def sgpr_collapsed_elbo_grad(X, y, Z, params: KernelHyperparams, noise=None):
    """Collapsed bound with diagonal noise and its exact gradient.

    ``noise=None`` uses the homoskedastic ``params.noise_variance``, which
    then also receives a gradient. A length-``n`` array gives fixed
    per-point variances (e.g. Laplace surrogate noise) and a zero noise
    gradient.

    Returns ``(value, grad_theta, grad_Z)`` where ``grad_theta`` follows
    ``params.to_vector()`` (log lengthscales, log outputscale, mean, log
    noise). With ``M = K_uu + K_uf S^{-1} K_fu`` and
    ``alpha = M^{-1} K_uf S^{-1} r`` the bound only needs ``p x p``
    factorisations; the matrix gradients are pushed through the kernel
    with :func:`matern52_vjp`.
    """
    Z = _as_Z(Z)
    X, y = _check_batch(X, y, Z.shape[1])
    n, p = X.shape[0], Z.shape[0]
    learned = noise is None
    s = np.full(n, params.noise_variance) if learned else np.broadcast_to(
        np.asarray(noise, dtype=float), (n,))
    si = 1.0 / s
    r = y - params.mean_const
    Kuu = matern52_ard(Z, Z, params)
    Kuf = matern52_ard(Z, X, params)
    Lu = cholesky_with_jitter(Kuu).L
    B = Kuf * si
    P = B @ Kuf.T
    Lm = cholesky_with_jitter(_sym(Kuu + P)).L
    alpha = chol_solve_vec(Lm, B @ r)
    Mi = chol_solve(Lm, np.eye(p))
    Kui = chol_solve(Lu, np.eye(p))
    Kfa = Kuf.T @ alpha
    q_diag = np.sum(Kuf * (Kui @ Kuf), axis=0)
    gap = params.outputscale - q_diag
    val = (-0.5 * r @ (si * r) + 0.5 * alpha @ (B @ r)
           - 0.5 * (chol_logdet(Lm) - chol_logdet(Lu) + np.sum(np.log(s)))
           - 0.5 * n * LOG2PI - 0.5 * np.sum(gap * si))
    G_uu = _sym(-0.5 * np.outer(alpha, alpha) - 0.5 * Mi + 0.5 * Kui - 0.5 * Kui @ P @ Kui)
    G_uf = np.outer(alpha, si * (r - Kfa)) + (Kui - Mi) @ B
    dZ1, dZ2, dl1, do1 = matern52_vjp(Z, Z, params, G_uu)
    dZ3, _, dl2, do2 = matern52_vjp(Z, X, params, G_uf)
    dmean = np.sum(si * (r - Kfa))
    d_log_noise = 0.0
    if learned:
        kMk = np.sum(Kuf * (Mi @ Kuf), axis=0)
        dF_ds = 0.5 * ((r - Kfa) ** 2 + kMk + gap) * si ** 2 - 0.5 * si
        d_log_noise = params.noise_variance * np.sum(dF_ds)
    grad_theta = np.concatenate([dl1 + dl2, [do1 + do2 - 0.5 * params.outputscale * np.sum(si),
                                             dmean, d_log_noise]])
    return float(val), grad_theta, dZ1 + dZ2 + dZ3


def whitened_kl(state: VariationalState) -> float:
    """``KL(N(m_bar, S_bar) || N(0, I))``."""
    p = state.p
    M = cholesky_with_jitter(_sym(state.S_bar)).L
    return float(0.5 * (np.trace(state.S_bar) + state.m_bar @ state.m_bar - p
                        - chol_logdet(M)))


def expected_log_lik(lik: LikelihoodSpec, y, mu, var):
    """``E_{N(f | mu, var)} log p(y | f)`` per observation."""
    var = np.clip(var, 0.0, None)
    if lik.is_gaussian:
        s2 = np.asarray(lik.noise_variance, dtype=float)
        return -0.5 * np.log(2 * np.pi * s2) - 0.5 * ((y - mu) ** 2 + var) / s2
    x, w = np.polynomial.hermite.hermgauss(GH_NODES)
    f = mu[..., None] + np.sqrt(2.0 * var)[..., None] * x
    lp = log_prob(lik, np.asarray(y, dtype=float)[..., None], f)
    if not np.all(np.isfinite(lp)):
        log.warning("non-finite log-likelihood at quadrature nodes; clamping")
        lp = np.nan_to_num(lp, nan=-1e300, neginf=-1e300)
    return lp @ w / np.sqrt(np.pi)


def svgp_elbo(X, y, lik: LikelihoodSpec, state) -> float:
    """Uncollapsed ELBO: expected log-likelihood minus the whitened KL."""
    vs = _as_variational(state)
    X, y = _check_batch(X, y, vs.Z.shape[1])
    kl = whitened_kl(vs)
    if X.shape[0] == 0:
        return -kl
    lik.check_support(y)
    post = sgpr_predict(vs, X, full_cov=False)
    return float(np.sum(expected_log_lik(lik, y, post.mean, post.variance)) - kl)


def select_inducing(X_cand, noise, params: KernelHyperparams, p: int) -> InducingSet:
    """Top-``p`` pivots of ``Sigma^{-1/2} K Sigma^{-1/2}`` over the candidates."""
    X_cand = _as_Z(X_cand)
    n = X_cand.shape[0]
    if not 1 <= p <= n:
        raise ValueError(f"p must lie in [1, {n}]")
    noise = as_noise(noise, n, params)
    Si = noise.inv_sqrt()
    M = _sym(Si @ matern52_ard(X_cand, X_cand, params) @ Si)
    fac = pivoted_cholesky(M, p)
    return InducingSet(X_cand[fac.pivots], fac.pivots, fac.residual_trace)


def osgpr_trace_terms(prev: VariationalState, new_Z, new_params: KernelHyperparams,
                      X, sigma2: float):
    """The two trace terms of the online sparse GP bound (diagnostic only).

    ``trace1 = tr(K_vv - Q_vv) / sigma2`` on the batch and
    ``trace2 = tr((S_u'^{-1} - K'^{-1})(K_aa - K_ab K_bb^{-1} K_ba))`` with
    ``a`` the old and ``b`` the new inducing points. The precision
    difference is never formed from inverses: in whitened form it is
    ``L'^{-T} (S_bar^{-1} - I) L'^{-1}``, read off the eigenvalues of
    ``S_bar``.
    """
    new_Z = _as_Z(new_Z)
    X = _as_Z(X).reshape(-1, new_Z.shape[1])
    Lb = kuu_cholesky(new_Z, new_params)
    if X.shape[0]:
        A = tri_solve(Lb, matern52_ard(new_Z, X, new_params))
        trace1 = (np.sum(kernel_diag(X, new_params)) - np.sum(A * A)) / sigma2
    else:
        trace1 = 0.0
    s, E, ct_eig = whitened_precision(prev, clip=True)
    La = prev.kuu_chol()
    Kab = matern52_ard(prev.Z, new_Z, new_params)
    G = tri_solve(Lb, Kab.T)
    D = _sym(matern52_ard(prev.Z, prev.Z, new_params) - G.T @ G)
    Dw = _sym(tri_solve(La, tri_solve(La, D).T).T)  # L'^{-1} D L'^{-T}
    Ct = (E * ct_eig) @ E.T
    trace2 = float(np.sum(Ct * Dw))
    return float(trace1), trace2


def _box(X, Z):
    lo = np.minimum(X.min(axis=0), Z.min(axis=0))
    hi = np.maximum(X.max(axis=0), Z.max(axis=0))
    return lo, hi


def train_sparse(X, y, lik: LikelihoodSpec, Z_init=None, params_init=None, steps: int = 100,
                 lr: float = 0.05, p: int | None = None, optimize_inducing: bool = True,
                 use_priors: bool = True, learn_noise: bool = True, refresh_every: int = 10,
                 min_noise: float = 1e-6):
    """Fit inducing points, hyperparameters and the variational state.

    Gaussian likelihoods: Adam on the collapsed bound plus hyperpriors, then
    the closed-form optimal variational state. Other likelihoods alternate a Laplace-surrogate
    refresh at the current hyperparameters with ``refresh_every`` Adam steps
    on the collapsed bound of the surrogate targets.

    Returns ``(InducingSet, KernelHyperparams, VariationalState)``.
    """
    X = _as_Z(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if steps < 0:
        raise ValueError("steps must be >= 0")
    lik.check_support(y)
    params = params_init if params_init is not None else KernelHyperparams.default(d)
    gaussian = lik.is_gaussian
    fixed_noise = None
    if gaussian:
        nv = np.asarray(lik.noise_variance, dtype=float)
        if nv.ndim:
            fixed_noise = NoiseModel.diagonal(np.broadcast_to(nv, (n,)))
        elif params_init is None:
            params = params.replace(noise_variance=float(nv))
    if Z_init is None:
        p = p or min(n, 32)
        Z_init = select_inducing(X, fixed_noise, params, p).Z
    Z = _as_Z(Z_init)
    dim_t = d + 3

    def surrogate(prm):
        if gaussian:
            return y, (fixed_noise if fixed_noise is not None
                       else NoiseModel.homoskedastic(prm.noise_variance, n))
        res = newton_map(matern52_ard(X, X, prm), y, lik, mean=prm.mean_const)
        return res.f_star, NoiseModel.diagonal(res.noise)

    if steps > 0:
        lo = np.full(dim_t, -np.inf)
        hi = np.full(dim_t, np.inf)
        lo[:d], hi[:d] = np.log(1e-3), np.log(1e3)
        lo[d], hi[d] = np.log(1e-4), np.log(1e4)
        lo[-1] = np.log(min_noise)
        zlo, zhi = _box(X, Z)
        lo = np.concatenate([lo, np.tile(zlo, Z.shape[0])])
        hi = np.concatenate([hi, np.tile(zhi, Z.shape[0])])
        mask = np.ones(lo.size, dtype=bool)
        mask[dim_t:] = optimize_inducing
        if not (gaussian and learn_noise and fixed_noise is None):
            mask[dim_t - 1] = False
        v = np.concatenate([params.to_vector(), Z.ravel()])
        done = 0
        chunk = steps if gaussian else max(1, refresh_every)
        while done < steps:
            prm = KernelHyperparams.from_vector(v[:dim_t])
            targets, nz_fixed = surrogate(prm)

            def objective(u, targets=targets, nz_fixed=nz_fixed):
                pr = KernelHyperparams.from_vector(u[:dim_t])
                Zu = u[dim_t:].reshape(-1, d)
                nz = nz_fixed
                if gaussian and fixed_noise is None:
                    nz = NoiseModel.homoskedastic(pr.noise_variance, n)
                try:
                    val = sgpr_collapsed_elbo(X, targets, nz, Zu, pr)
                except (NumericalError, np.linalg.LinAlgError):
                    return -np.inf
                return val + (hyperprior_logpdf(pr) if use_priors else 0.0)

            nz_vec = None if (gaussian and fixed_noise is None) else nz_fixed.diag()

            def gradient(u, targets=targets, nz_vec=nz_vec):
                pr = KernelHyperparams.from_vector(u[:dim_t])
                try:
                    _, g_t, g_z = sgpr_collapsed_elbo_grad(X, targets, u[dim_t:].reshape(-1, d),
                                                           pr, nz_vec)
                except (NumericalError, np.linalg.LinAlgError):
                    return np.full(u.size, np.nan)
                if use_priors:
                    g_t = g_t + hyperprior_grad(pr)
                return np.concatenate([g_t, g_z.ravel()])

            k = min(chunk, steps - done)
            v = adam_ascent(objective, v, steps=k, lr=lr, lower=lo, upper=hi, mask=mask,
                            grad=gradient,
                            patience=10 if gaussian else k + 1)
            done += k
        params = KernelHyperparams.from_vector(v[:dim_t])
        Zn = v[dim_t:].reshape(-1, d)
        try:
            Z = InducingSet(Zn).Z
        except ValueError:
            log.warning("optimised inducing points collapsed; keeping the initial set")
    targets, nz = surrogate(params)
    state = canonical_to_variational(canonical_from_data(X, targets, nz, Z, params))
    return InducingSet(Z), params, state

"""Online variational conditioning.

A sparse variational state is equivalent to an exact GP on ``p`` pseudo
observations ``(Z, y_hat)`` with correlated noise ``Sigma_yhat``. New data
(real or fantasised) are conditioned on by stacking them onto the
pseudo-data and extending the Cholesky factor. Streaming updates project
the old state onto new inducing points and hyperparameters.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .exact import ExactGPModel, condition_exact, fit_exact
from .kernels import KernelHyperparams, matern52_ard
from .linalg import pivoted_cholesky, tri_solve, tri_solve_vec
from .noise import NoiseModel, as_noise
from .optim import adam_ascent
from .sparse import (CanonicalState, InducingSet, VariationalState, _MIN_GAP, _as_Z, _sym,
                     canonical_from_data, canonical_to_variational, kuu_cholesky,
                     osgpr_trace_terms, sgpr_collapsed_elbo, variational_to_canonical,
                     whitened_precision)

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = "ovcgp-state v1"


@dataclass(frozen=True, eq=False)
class PseudoDataset:
    """Pseudo observations equivalent to a sparse variational state.

    ``Sigma_root @ Sigma_root.T == Sigma_yhat``; ``noise_scale`` is the
    largest pseudo-noise eigenvalue, which grows without bound as the state
    approaches the prior.
    """

    Z_prev: np.ndarray
    y_hat: np.ndarray
    Sigma_yhat: np.ndarray
    Sigma_root: np.ndarray

    @property
    def noise_scale(self) -> float:
        return float(np.max(np.sum(self.Sigma_root ** 2, axis=1)))


def to_pseudo_data(state: VariationalState, clip: bool = False) -> PseudoDataset:
    """Pseudo-data ``y_hat = K C^{-1} c + m`` and ``Sigma_yhat = K C^{-1} K``.

    With ``S_bar = E diag(s) E^T`` the whitened precision is
    ``Ct = E diag(1/s - 1) E^T``, so ``Sigma_yhat = (L E) diag(s/(1-s)) (L E)^T``
    and ``y_hat - m = L E diag(1/(1-s)) E^T m_bar``. Nothing of the form
    ``(K - S)^{-1}`` is formed, and the result is PSD by construction.
    ``clip=True`` gives directions the data never touched a very large but
    finite pseudo-noise instead of raising.
    """
    s, E, _ = whitened_precision(state, clip=clip)
    if clip:
        s = np.minimum(s, 1.0 - _MIN_GAP)
    L = state.kuu_chol()
    LE = L @ E
    root = LE * np.sqrt(s / (1.0 - s))
    y_hat = state.params.mean_const + LE @ ((E.T @ state.m_bar) / (1.0 - s))
    Sigma = _sym(root @ root.T)
    out = PseudoDataset(state.Z, y_hat, Sigma, root)
    if out.noise_scale > 1e8 * state.params.outputscale:
        log.info("pseudo-noise is large (%.3g): state is close to the prior", out.noise_scale)
    return out


# pseudo-data GPs are reused while the (immutable) state object is alive
_PSEUDO_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def pseudo_data_model(state: VariationalState) -> ExactGPModel:
    """Exact GP on the pseudo-data of ``state`` alone."""
    model = _PSEUDO_CACHE.get(state)
    if model is None:
        pdat = to_pseudo_data(state)
        model = fit_exact(pdat.Z_prev, pdat.y_hat, NoiseModel.dense(pdat.Sigma_yhat),
                          state.params)
        _PSEUDO_CACHE[state] = model
    return model


def ovc_condition(state: VariationalState, X_batch, y, noise_batch=None) -> ExactGPModel:
    """Condition a sparse state on a batch, returning an exact GP.

    ``y`` (and ``X_batch``) may carry leading batch axes, e.g. one row per
    fantasy sample; the returned model then carries the same axes.
    ``noise_batch`` defaults to the homoskedastic noise in ``state.params``;
    non-Gaussian observations should be passed as Laplace surrogates.
    """
    base = pseudo_data_model(state)
    X_batch = np.asarray(X_batch, dtype=float)
    if X_batch.ndim == 1:
        X_batch = X_batch.reshape(-1, state.Z.shape[1])
    if X_batch.shape[-2] == 0:
        return base
    return condition_exact(base, X_batch, y, noise_batch)


def stream_update(prev: CanonicalState, X, y, noise, new_Z, new_params: KernelHyperparams
                  ) -> CanonicalState:
    """Project ``prev`` onto ``(new_Z, new_params)`` and add a batch.

    Uses the projection ``P = K'^{-1}``::

        c = K_uv Sigma^{-1} (y - m) + K_uu' (K'^{-1} c' + K'^{-1} C' K'^{-1} 1 (m' - m))
        C = K_uv Sigma^{-1} K_vu + K_uu' K'^{-1} C' K'^{-1} K_u'u

    The ``m' - m`` term accounts for a change of the constant mean.
    """
    new_Z = _as_Z(new_Z)
    data = canonical_from_data(X, y, noise, new_Z, new_params)
    Lp = kuu_cholesky(prev.Z, prev.params)
    Kuu_p = matern52_ard(new_Z, prev.Z, new_params)
    # K'^{-1} K_u'u via two triangular solves
    Pk = tri_solve(Lp, tri_solve(Lp, Kuu_p.T), trans=True)
    shift = prev.params.mean_const - new_params.mean_const
    Kinv_c = tri_solve_vec(Lp, tri_solve_vec(Lp, prev.c), trans=True)
    c = data.c + Kuu_p @ Kinv_c
    if shift:
        Kinv_1 = tri_solve_vec(Lp, tri_solve_vec(Lp, np.ones(prev.p)), trans=True)
        c = c + shift * (Pk.T @ (prev.C @ Kinv_1))
    C = data.C + _sym(Pk.T @ prev.C @ Pk)
    return CanonicalState(new_Z, new_params, c, C)


def _pseudo_precision_sqrt(state: VariationalState):
    """Symmetric square root of ``Sigma_yhat^{-1} = L^{-T} Ct L^{-1}``."""
    s, E, ct_eig = whitened_precision(state, clip=True)
    L = state.kuu_chol()
    F = tri_solve(L, E, trans=True) * np.sqrt(ct_eig)  # F F^T = precision
    # SVD of F rather than eigh of F F^T, which would square its conditioning
    U, sv, _ = np.linalg.svd(F)
    return (U * sv) @ U.T


def reselect_inducing_online(state: VariationalState, X_batch, noise_batch, p: int,
                             params: KernelHyperparams | None = None) -> InducingSet:
    """Top-``p`` pivots over the batch points stacked on the old inducing points.

    The matrix factorised is ``Sigma^{-1/2} K Sigma^{-1/2}`` with
    ``Sigma = blkdiag(batch noise, Sigma_yhat)``. Pivot indices refer to the
    stacked candidate array ``[X_batch; Z_old]``.
    """
    params = params or state.params
    d = state.Z.shape[1]
    X_batch = np.asarray(X_batch, dtype=float).reshape(-1, d)
    n = X_batch.shape[0]
    cand = np.concatenate([X_batch, state.Z], axis=0)
    if not 1 <= p <= cand.shape[0]:
        raise ValueError(f"p must lie in [1, {cand.shape[0]}]")
    Si = np.zeros((cand.shape[0], cand.shape[0]))
    if n:
        Si[:n, :n] = as_noise(noise_batch, n, params).inv_sqrt()
    Si[n:, n:] = _pseudo_precision_sqrt(state)
    M = _sym(Si @ matern52_ard(cand, cand, params) @ Si)
    fac = pivoted_cholesky(M, p)
    if fac.rank < p:
        log.info("only %d of %d requested pivots are numerically distinct", fac.rank, p)
    return InducingSet(cand[fac.pivots], fac.pivots, fac.residual_trace)


def stream_step(state, X, y, noise=None, p: int | None = None,
                new_params: KernelHyperparams | None = None, keep_Z: bool = False):
    """One online-learning step: reselect, project and update, re-whiten.

    ``state`` may be a variational or canonical state; a prior variational
    state (``S_bar = I``) is accepted and treated as carrying no data.
    Returns ``(VariationalState, diagnostics)``.
    """
    if isinstance(state, CanonicalState):
        prev_can = state
        state = canonical_to_variational(state)
    else:
        prev_can = variational_to_canonical(state, clip=True)
    params = new_params or state.params
    d = state.Z.shape[1]
    X = np.asarray(X, dtype=float).reshape(-1, d)
    y = np.asarray(y, dtype=float).reshape(-1)
    noise = as_noise(noise, X.shape[0], params) if X.shape[0] else None
    diag = {"residual_trace": None}
    if keep_Z:
        Z_new = state.Z
    else:
        sel = reselect_inducing_online(state, X, noise, p or state.p, params)
        Z_new = sel.Z
        diag["residual_trace"] = sel.residual_trace
    can = stream_update(prev_can, X, y, noise, Z_new, params)
    new_state = canonical_to_variational(can)
    sigma2 = params.noise_variance
    t1, t2 = osgpr_trace_terms(state, Z_new, params, X, sigma2)
    diag.update(trace1=t1, trace2=t2, p=int(Z_new.shape[0]))
    return new_state, diag


def osgpr_bound(state: VariationalState, X, y, noise, Z, params=None) -> float:
    """Online sparse GP bound for new inducing points ``Z`` (up to a constant).

    Equal to the collapsed bound on the batch stacked with the pseudo-data
    of ``state``; its trace term splits into the batch part (``trace1``) and
    the pseudo-data part (``trace2``).
    """
    params = params or state.params
    d = state.Z.shape[1]
    X = np.asarray(X, dtype=float).reshape(-1, d)
    pdat = to_pseudo_data(state, clip=True)
    noise = as_noise(noise, X.shape[0], params) if X.shape[0] else NoiseModel()
    Xs = np.concatenate([X, pdat.Z_prev])
    ys = np.concatenate([np.asarray(y, dtype=float).reshape(-1), pdat.y_hat])
    return sgpr_collapsed_elbo(Xs, ys, noise.concat(NoiseModel.dense(pdat.Sigma_yhat)), Z, params)


def osgpr_step(state: VariationalState, X, y, noise=None, steps: int = 5, lr: float = 0.05,
               max_cond: float = np.inf, train_hypers: bool = True):
    """Online sparse GP step with ``Z`` (and optionally θ) re-trained on :func:`osgpr_bound`.

    Starts from the old inducing points and hyperparameters and takes
    ``steps`` finite-difference Adam steps, keeping the final iterate as a
    stochastic-optimiser training loop would. Used to expose the trace
    diagnostic of gradient-trained online sparse GPs.

    Parameters
    ----------
    noise : fixed observation noise; when given the noise variance is not trained
    max_cond : reject iterates whose ``K_uu`` condition number exceeds this.
        Off by default, since rejecting iterates freezes ``Z`` in place.

    If the final update cannot be factorised, the old inducing points are
    kept and a warning is logged.
    """
    params = state.params
    d = state.Z.shape[1]
    p = state.p
    X = np.asarray(X, dtype=float).reshape(-1, d)
    fixed_noise = noise is not None
    lo = np.minimum(X.min(axis=0), state.Z.min(axis=0)) if X.shape[0] else state.Z.min(axis=0)
    hi = np.maximum(X.max(axis=0), state.Z.max(axis=0)) if X.shape[0] else state.Z.max(axis=0)
    theta0 = params.to_vector()
    k = theta0.size if train_hypers else 0
    t_lo = np.r_[np.full(d, np.log(1e-3)), np.log(1e-4), -np.inf, np.log(1e-6)]
    t_hi = np.r_[np.full(d, np.log(1e3)), np.log(1e4), np.inf, np.log(1e2)]

    def unpack(v):
        prm = KernelHyperparams.from_vector(v[:k]) if k else params
        return v[k:].reshape(-1, d), prm

    def f(v):
        Z, prm = unpack(v)
        # points drifting onto each other make K_uu numerically singular
        if np.isfinite(max_cond) and np.linalg.cond(matern52_ard(Z, Z, prm)) > max_cond:
            return -np.inf
        try:
            nz = noise if fixed_noise else None
            return osgpr_bound(state, X, y, nz, Z, prm)
        except (np.linalg.LinAlgError, ArithmeticError, StateError):
            return -np.inf

    v0 = np.r_[theta0[:k], state.Z.ravel()]
    lower = np.r_[t_lo[:k], np.tile(lo, p)]
    upper = np.r_[t_hi[:k], np.tile(hi, p)]
    mask = None
    if k and fixed_noise:
        mask = np.ones(v0.size, bool)
        mask[k - 1] = False
    v = adam_ascent(f, v0, steps=steps, lr=lr, lower=lower, upper=upper, mask=mask,
                    patience=steps + 1, keep_best=False)
    Z_new, new_params = unpack(v)
    nz = as_noise(noise, X.shape[0], new_params) if X.shape[0] else None
    prev_can = variational_to_canonical(state, clip=True)
    try:
        new_state = canonical_to_variational(stream_update(prev_can, X, y, nz, Z_new,
                                                           new_params))
    except np.linalg.LinAlgError:
        log.warning("inducing points collapsed during the online step; keeping the old ones")
        Z_new = state.Z
        new_state = canonical_to_variational(stream_update(prev_can, X, y, nz, Z_new,
                                                           new_params))
    t1, t2 = osgpr_trace_terms(state, Z_new, new_params, X, new_params.noise_variance)
    return new_state, {"trace1": t1, "trace2": t2, "p": p,
                       "noise_variance": new_params.noise_variance}


def resample_inducing(Z_old, X_batch, rng: np.random.Generator) -> np.ndarray:
    """Baseline: replace ``min(b, p)`` random old inducing points with batch points."""
    Z = np.array(Z_old, dtype=float)
    X_batch = np.asarray(X_batch, dtype=float).reshape(-1, Z.shape[1])
    k = min(X_batch.shape[0], Z.shape[0])
    if k:
        slots = rng.choice(Z.shape[0], size=k, replace=False)
        picks = rng.choice(X_batch.shape[0], size=k, replace=False)
        Z[slots] = X_batch[picks]
    return Z


def state_from_pseudo_data(pdat: PseudoDataset, params: KernelHyperparams) -> VariationalState:
    """Rebuild the variational state that a pseudo-dataset encodes."""
    can = canonical_from_data(pdat.Z_prev, pdat.y_hat, NoiseModel.dense(pdat.Sigma_yhat),
                              pdat.Z_prev, params)
    return canonical_to_variational(can)


# ---------------------------------------------------------------- snapshots

def _fmt(values) -> str:
    return " ".join("%.17g" % v for v in np.ravel(values))


def save_snapshot(path, state: VariationalState, binary: bool = False):
    """Write ``(params, Z, y_hat, Sigma_yhat)`` with a version tag.

    The text form prints every number with 17 significant digits, which
    round-trips IEEE doubles exactly. ``binary=True`` writes an ``.npz``.
    """
    pdat = to_pseudo_data(state)
    prm = state.params
    if binary:
        with open(path, "wb") as fh:
            np.savez(fh, version=np.array(SNAPSHOT_VERSION), params=prm.to_vector(),
                     Z=pdat.Z_prev, y_hat=pdat.y_hat, Sigma_yhat=pdat.Sigma_yhat)
        return
    p, d = pdat.Z_prev.shape
    lines = [SNAPSHOT_VERSION,
             f"dims {p} {d}",
             "params " + _fmt(prm.to_vector()),
             "Z " + _fmt(pdat.Z_prev),
             "y_hat " + _fmt(pdat.y_hat),
             "Sigma_yhat " + _fmt(pdat.Sigma_yhat)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path):
    """Read a snapshot; returns ``(PseudoDataset, KernelHyperparams)``."""
    with open(path, "rb") as fh:
        head = fh.read(6)
    if head.startswith(b"PK"):
        with np.load(path) as z:
            if str(z["version"]) != SNAPSHOT_VERSION:
                raise StateError(f"unsupported snapshot version {z['version']}")
            prm = KernelHyperparams.from_vector(z["params"])
            Z, y_hat, Sig = z["Z"], z["y_hat"], z["Sigma_yhat"]
    else:
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines or lines[0] != SNAPSHOT_VERSION:
            raise StateError(f"unsupported snapshot header {lines[:1]!r}")
        fields = {}
        for ln in lines[1:]:
            key, _, rest = ln.partition(" ")
            fields[key] = rest.split()
        p, d = (int(v) for v in fields["dims"])
        prm = KernelHyperparams.from_vector(np.array(fields["params"], dtype=float))
        Z = np.array(fields["Z"], dtype=float).reshape(p, d)
        y_hat = np.array(fields["y_hat"], dtype=float)
        Sig = np.array(fields["Sigma_yhat"], dtype=float).reshape(p, p)
    w, V = np.linalg.eigh(Sig)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    return PseudoDataset(Z, y_hat, Sig, root), prm

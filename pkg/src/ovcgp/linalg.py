"""Dense linear-algebra primitives: jittered Cholesky, pivoted Cholesky and
low-rank inverse-root updates.

Most helpers accept stacks of matrices with arbitrary leading batch
dimensions, which is how fantasy ensembles are represented throughout the
package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NotPositiveDefiniteError, NumericalError

JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2)


@dataclass(frozen=True)
class CholeskyFactor:
    L: np.ndarray
    jitter_used: float = 0.0


@dataclass(frozen=True)
class PivotedFactor:
    """Result of a (partial) pivoted Cholesky factorisation.

    ``L`` has rows in the original ordering, so ``L @ L.T`` approximates the
    input directly. ``trace_history[k]`` is the residual trace after ``k``
    pivots.
    """

    pivots: np.ndarray
    L: np.ndarray
    residual_trace: float
    trace_history: np.ndarray = field(repr=False)

    @property
    def rank(self) -> int:
        return self.pivots.size


def cholesky_with_jitter(A, max_tries: int = len(JITTER_LADDER)) -> CholeskyFactor:
    """Lower Cholesky factor, adding diagonal jitter only when needed.

    Jitter is tried in the order ``JITTER_LADDER * mean(diag(A))``; the first
    value that factorises wins. Stacks of matrices share one jitter level.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError("expected a square matrix (or a stack of them)")
    if A.shape[-1] == 0:
        return CholeskyFactor(np.zeros_like(A), 0.0)
    scale = np.max(np.abs(A)) if A.size else 0.0
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2)))
    if asym > 1e-8 * max(scale, 1e-300):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    mean_diag = float(np.mean(diag))
    eye = np.eye(A.shape[-1])
    for frac in JITTER_LADDER[:max_tries]:
        jitter = frac * mean_diag
        try:
            L = np.linalg.cholesky(A + jitter * eye if jitter else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return CholeskyFactor(L, jitter)
    raise NotPositiveDefiniteError(
        f"Cholesky failed after {max_tries} jitter levels "
        f"(mean diagonal {mean_diag:.3g}); matrix is indefinite")


def tri_solve(L, B, lower=True, trans=False):
    """Solve ``L X = B`` (or ``L^T X = B``) for triangular ``L``.

    ``B`` is ``(..., n, k)``; ``L`` may be a single matrix or a stack, and
    batch dimensions broadcast.
    """
    L = np.asarray(L)
    B = np.asarray(B, dtype=float)
    if L.ndim == 2:
        n = L.shape[0]
        batch = B.shape[:-2]
        k = B.shape[-1]
        Bm = np.moveaxis(B, -2, 0).reshape(n, -1)
        X = sla.solve_triangular(L, Bm, lower=lower, trans=1 if trans else 0,
                                 check_finite=False)
        return np.moveaxis(X.reshape((n,) + batch + (k,)), 0, -2)
    M = np.swapaxes(L, -1, -2) if trans else L
    shape = np.broadcast_shapes(M.shape[:-2], B.shape[:-2])
    return np.linalg.solve(np.broadcast_to(M, shape + M.shape[-2:]),
                           np.broadcast_to(B, shape + B.shape[-2:]))


def tri_solve_vec(L, b, lower=True, trans=False):
    """Like :func:`tri_solve` for right-hand sides that are (batches of) vectors."""
    return tri_solve(L, np.asarray(b, dtype=float)[..., None], lower, trans)[..., 0]


def chol_solve(L, B):
    """Solve ``(L L^T) X = B`` given the lower factor ``L``."""
    return tri_solve(L, tri_solve(L, B), trans=True)


def chol_solve_vec(L, b):
    return tri_solve_vec(L, tri_solve_vec(L, b), trans=True)


def chol_logdet(L) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def pivoted_cholesky(A, max_rank: int, rel_tol: float = 0.0,
                     rule: str = "trace") -> PivotedFactor:
    """Greedy partial Cholesky factorisation of a PSD matrix.

    Parameters
    ----------
    A : (n, n) PSD array
    max_rank : int
        Maximum number of pivots.
    rel_tol : float
        Stop early once the residual trace drops to ``rel_tol * trace(A)``.
    rule : {"trace", "diagonal"}
        ``"trace"`` picks the pivot giving the largest one-step reduction of
        the residual trace, ``||R[:, j]||^2 / R[j, j]``; ``"diagonal"`` is the
        classical largest-residual-diagonal rule. Ties go to the lowest
        index under either rule.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("expected a square matrix")
    if max_rank > n or max_rank < 0:
        raise ValueError(f"max_rank must lie in [0, {n}]")
    if rule not in ("trace", "diagonal"):
        raise ValueError(f"unknown pivot rule {rule!r}")
    tr0 = float(np.trace(A))
    floor = -1e-8 * max(abs(tr0), 1e-300)
    R = A
    L = np.zeros((n, max_rank))
    pivots = []
    history = [tr0]
    chosen = np.zeros(n, dtype=bool)
    for k in range(max_rank):
        d = np.diagonal(R).copy()
        if d.min() < floor:
            raise NumericalError(
                f"negative residual diagonal {d.min():.3g} after {k} pivots")
        if d.sum() <= rel_tol * tr0:
            break
        usable = (~chosen) & (d > 1e-14 * max(tr0 / n, 1e-300))
        if not usable.any():
            break
        if rule == "trace":
            score = np.where(usable, np.einsum("ij,ij->j", R, R) / np.where(usable, d, 1.0), -np.inf)
        else:
            score = np.where(usable, d, -np.inf)
        j = int(np.argmax(score))
        col = R[:, j] / np.sqrt(d[j])
        L[:, k] = col
        R = R - np.outer(col, col)
        chosen[j] = True
        pivots.append(j)
        history.append(float(np.trace(R)))
    k = len(pivots)
    resid = float(np.trace(R))
    if resid < floor:
        raise NumericalError(f"negative residual trace {resid:.3g}")
    return PivotedFactor(np.array(pivots, dtype=int), L[:, :k], resid, np.array(history))


def psd_sqrt(V, tol=1e-10):
    """Symmetric factor ``F`` with ``F F^T = V`` for a PSD (possibly singular) ``V``."""
    V = np.asarray(V, dtype=float)
    w, E = np.linalg.eigh(0.5 * (V + V.T))
    scale = max(np.max(np.abs(w)), 1e-300) if w.size else 1.0
    if w.size and w.min() < -tol * scale:
        raise NumericalError(f"matrix is indefinite (eigenvalue {w.min():.3g})")
    return E * np.sqrt(np.clip(w, 0.0, None))


def woodbury_inverse_update(S, U, V_inner):
    """Inverse root after a low-rank update.

    Given ``S`` with ``S S^T = A^{-1}``, return ``R`` with
    ``R R^T = (A + U V U^T)^{-1}`` at ``O(n^2 k)`` cost. ``V_inner`` only
    needs to be PSD, so singular or rank-deficient updates are fine.
    """
    S = np.asarray(S, dtype=float)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[0] != S.shape[0] and U.shape[1] == S.shape[0]:
        U = U.T
    V_inner = np.atleast_2d(np.asarray(V_inner, dtype=float))
    if U.shape[1] != V_inner.shape[0]:
        raise ValueError("U and V_inner have incompatible shapes")
    if U.shape[1] == 0:
        return S.copy()
    # (A + U V U^T)^{-1} = S (I + Q Q^T)^{-1} S^T with Q = S^T U V^{1/2}
    Q = S.T @ U @ psd_sqrt(V_inner)
    Qo, Rq = np.linalg.qr(Q)
    try:
        lam, E = np.linalg.eigh(Rq @ Rq.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("inner eigendecomposition failed") from exc
    if not np.all(np.isfinite(lam)):
        raise NumericalError("inner system is ill-conditioned")
    lam = np.clip(lam, 0.0, None)
    W = Qo @ E
    return S + (S @ W) * (1.0 / np.sqrt(1.0 + lam) - 1.0) @ W.T

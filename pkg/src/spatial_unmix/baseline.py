"""Fully constrained least squares (FCLS) unmixing.

The sum-to-one constraint is imposed by appending a heavily weighted row
of ones to the endmember matrix and solving the augmented system with a
Lawson-Hanson active-set NNLS.  The support found that way is then
re-solved with the equality constraint enforced exactly, so the returned
abundances sum to one to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, IllConditionedError, InvalidArgumentError
from .model import AbundanceMatrix, EndmemberMatrix, ImageCube

WEIGHT_FACTOR = 1e3


@dataclass
class FCLSResult:
    abundances: np.ndarray
    support: np.ndarray  # bool mask of strictly positive components
    iterations: int
    kkt_residual: float


def _as_matrix(M) -> np.ndarray:
    return M.spectra if isinstance(M, EndmemberMatrix) else np.asarray(M, dtype=float)


def check_rank(M: np.ndarray, rcond: float = 1e-10) -> None:
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= rcond * sv[0]:
        raise IllConditionedError(
            f"endmember matrix is rank deficient (singular values {sv[0]:.3g} ... {sv[-1]:.3g})"
        )


def nnls(A, b, tol=1e-10, max_iter=None, passive=None):
    """Lawson-Hanson active-set NNLS: ``min ||A x - b||`` subject to ``x >= 0``.

    Parameters
    ----------
    A, b : array
        System matrix ``(m, n)`` and target ``(m,)``.
    tol : float
        Convergence threshold on the KKT residual, the largest gradient
        component over the active (zero) set, relative to ``max|A^T b|``.
    max_iter : int, optional
        Outer iteration cap, ``10 n^2`` by default.
    passive : bool array, optional
        Warm-start support.

    Returns
    -------
    x, passive_mask, iterations, kkt_residual
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    if max_iter is None:
        max_iter = 10 * n * n
    scale = max(np.max(np.abs(A.T @ b)), np.finfo(float).tiny)

    x = np.zeros(n)
    P = np.zeros(n, dtype=bool)
    if passive is not None:
        P = np.asarray(passive, dtype=bool).copy()
        x = _feasible_solve(A, b, P, x)
        P = x > 0

    def kkt(x, P):
        w = A.T @ (b - A @ x)
        resid = np.max(w[~P]) / scale if (~P).any() else 0.0
        return w, max(resid, 0.0)

    w, resid = kkt(x, P)
    it = 0
    while resid > tol:
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"NNLS did not converge in {max_iter} iterations")
        j = np.flatnonzero(~P)[np.argmax(w[~P])]
        P[j] = True
        x = _feasible_solve(A, b, P, x)
        P = x > 0
        w, resid = kkt(x, P)
    return x, P, it, resid


def _feasible_solve(A, b, P, x):
    """Inner loop: least squares on the passive set, backtracking to stay nonnegative."""
    P = P.copy()
    for _ in range(A.shape[1] + 1):
        s = np.zeros_like(x)
        if P.any():
            s[P] = np.linalg.lstsq(A[:, P], b, rcond=None)[0]
        if np.all(s[P] > 0):
            return s
        neg = P & (s <= 0)
        alpha = np.min(x[neg] / (x[neg] - s[neg]))
        x = x + alpha * (s - x)
        P &= x > np.finfo(float).eps * max(1.0, np.max(np.abs(x)))
        x[~P] = 0.0
    return np.where(P, x, 0.0)


def _equality_polish(M, y, support):
    """Exact least squares on the support under sum-to-one; None if it leaves the orthant."""
    Ms = M[:, support]
    G = Ms.T @ Ms
    ones = np.ones(G.shape[0])
    Gi_b = np.linalg.solve(G, Ms.T @ y)
    Gi_1 = np.linalg.solve(G, ones)
    mu = (ones @ Gi_b - 1.0) / (ones @ Gi_1)
    a_s = Gi_b - mu * Gi_1
    if np.any(a_s < 0):
        return None
    a = np.zeros(M.shape[1])
    a[support] = a_s
    return a


def fcls_solve(y, M, tol=1e-10, weight=None, passive=None) -> FCLSResult:
    M = _as_matrix(M)
    y = np.asarray(y, dtype=float)
    L, R = M.shape
    if y.shape != (L,):
        raise InvalidArgumentError(f"spectrum length {y.shape} does not match L={L}")
    check_rank(M)
    if weight is None:
        weight = WEIGHT_FACTOR * np.max(np.abs(M))
    A = np.vstack([M, weight * np.ones((1, R))])
    b = np.append(y, weight)
    x, P, it, resid = nnls(A, b, tol=tol, max_iter=10 * R * R, passive=passive)
    a = None
    support = P.copy()
    for _ in range(R):
        if not support.any():
            break
        a = _equality_polish(M, y, support)
        if a is None:
            break
        # exact-problem KKT: no zero component may have a descent direction
        g = M.T @ (M @ a - y)
        lam = g[support].mean()
        slack = np.where(support, np.inf, g - lam)
        if slack.min() >= -tol * max(np.max(np.abs(g)), 1.0):
            break
        support[np.argmin(slack)] = True
    if a is None:
        a = x / x.sum()
    return FCLSResult(a, a > 0, it, resid)


def fcls_unmix_pixel(y, M, tol=1e-10) -> np.ndarray:
    """FCLS abundances of one spectrum: ``argmin ||y - M a||`` on the simplex."""
    return fcls_solve(y, M, tol=tol).abundances


def fcls_unmix_image(Y, M, tol=1e-10) -> AbundanceMatrix:
    data = Y.data if isinstance(Y, ImageCube) else np.asarray(Y, dtype=float)
    M = _as_matrix(M)
    if data.shape[1] != M.shape[0]:
        raise InvalidArgumentError(f"cube has {data.shape[1]} bands, endmembers have {M.shape[0]}")
    check_rank(M)
    out = np.empty((M.shape[1], data.shape[0]))
    for p, y in enumerate(data):
        try:
            out[:, p] = fcls_solve(y, M, tol=tol).abundances
        except (ConvergenceError, InvalidArgumentError) as exc:
            raise type(exc)(f"pixel {p}: {exc}") from exc
    return AbundanceMatrix(out)

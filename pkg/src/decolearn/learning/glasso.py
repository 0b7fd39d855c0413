"""Graphical lasso with the l1 penalty on every entry, diagonal included.

Solves ``max_L  log det L - tr(L Sigma) - r * sum_ij |L_ij|`` by block
coordinate descent on the covariance estimate ``W = inv(L)``: each sweep
visits every column, solves the lasso subproblem for it by coordinate
descent and writes the implied column back into ``W``.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import GlassoError

KKT_TOL = 1e-6


def _soft(x, r):
    return np.sign(x) * max(abs(x) - r, 0.0)


def _lasso_cd(W11, s12, r, beta, tol, max_iter):
    """Minimize ``0.5 b' W11 b - b' s12 + r |b|_1`` in place."""
    p = beta.shape[0]
    grad = W11 @ beta
    for _ in range(max_iter):
        delta = 0.0
        for k in range(p):
            old = beta[k]
            partial = s12[k] - (grad[k] - W11[k, k] * old)
            new = _soft(partial, r) / W11[k, k]
            if new != old:
                grad += W11[:, k] * (new - old)
                beta[k] = new
                delta = max(delta, abs(new - old))
        if delta <= tol:
            break
    return beta


def kkt_residual(Lambda: np.ndarray, Sigma: np.ndarray, r: float) -> float:
    """Largest violation of the optimality conditions.

    Stationarity reads ``inv(L) - Sigma - r * sign(L) = 0`` on the support
    and ``|inv(L) - Sigma| <= r`` off it.
    """
    G = np.linalg.inv(Lambda) - Sigma
    support = np.abs(Lambda) > 0
    on = np.abs(G - r * np.sign(Lambda))[support]
    off = np.maximum(np.abs(G[~support]) - r, 0.0)
    return float(max(on.max(initial=0.0), off.max(initial=0.0)))


def glasso(
    Sigma,
    r: float,
    tol: float = 1e-12,
    max_sweeps: int = 500,
    max_inner: int = 10_000,
    check_kkt: bool = True,
) -> np.ndarray:
    """Sparse precision matrix for the sample covariance ``Sigma``.

    Parameters
    ----------
    Sigma : array-like of shape (M, M)
        Symmetric matrix with positive diagonal.
    r : float
        Nonnegative penalty strength.
    tol : float
        Stop once a full sweep changes ``W`` by less than ``tol`` times its
        mean absolute off-diagonal size.

    Returns
    -------
    Lambda : ndarray of shape (M, M)
        Symmetric positive-definite maximizer.

    Raises
    ------
    GlassoError
        If the sweeps do not converge or the final KKT residual exceeds 1e-6.
    """
    S = np.array(Sigma, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"Sigma must be square, got shape {S.shape}")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise ValueError("Sigma must be symmetric")
    S = 0.5 * (S + S.T)
    if np.any(np.diag(S) <= 0) and r <= 0:
        raise ValueError("Sigma must have a positive diagonal")
    if r < 0:
        raise ValueError(f"penalty must be nonnegative, got {r}")
    M = S.shape[0]
    W = S + r * np.eye(M)
    if M == 1:
        return np.array([[1.0 / W[0, 0]]])

    betas = np.zeros((M, M - 1))
    idx = np.arange(M)
    converged = False
    for _ in range(max_sweeps):
        W_old = W.copy()
        for j in range(M):
            rest = idx != j
            W11 = W[np.ix_(rest, rest)]
            s12 = S[rest, j]
            beta = _lasso_cd(W11, s12, r, betas[j], tol * 1e-2, max_inner)
            betas[j] = beta
            w12 = W11 @ beta
            W[rest, j] = w12
            W[j, rest] = w12
        scale = np.abs(W_old).mean()
        if np.abs(W - W_old).max() <= tol * max(scale, 1e-300):
            converged = True
            break

    Lambda = np.empty((M, M))
    for j in range(M):
        rest = idx != j
        beta = betas[j]
        w12 = W[rest, j]
        theta = 1.0 / (W[j, j] - w12 @ beta)
        Lambda[j, j] = theta
        Lambda[rest, j] = -beta * theta
    Lambda = 0.5 * (Lambda + Lambda.T)

    if not np.all(np.isfinite(Lambda)):
        raise GlassoError("glasso produced a non-finite precision", residual=float("inf"))
    if check_kkt:
        try:
            np.linalg.cholesky(Lambda)
        except np.linalg.LinAlgError as exc:
            raise GlassoError(
                "glasso produced a non positive-definite precision", residual=float("inf")
            ) from exc
        res = kkt_residual(Lambda, S, r)
        if res > KKT_TOL * max(1.0, np.abs(S).max()):
            raise GlassoError(
                f"glasso {'stalled' if converged else 'did not converge'}; KKT residual {res:.2e}",
                residual=res,
            )
    return Lambda

"""Exact samplers for Gaussian Gram matrices.

With Gaussian rows, a dataset enters every estimator only through its Gram
matrix, which can be drawn directly from Wishart and matrix-normal laws.
These samplers produce exactly the distribution of ``Z'Z`` for a simulated
``Z``, at a cost independent of the number of rows.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg


def standard_wishart(df: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Bartlett draw from Wishart(df, I_dim); requires ``df >= dim``."""
    if df < dim:
        raise ValueError(f"Wishart degrees of freedom {df} < dimension {dim}")
    T = np.tril(rng.standard_normal((dim, dim)), -1)
    T[np.diag_indices(dim)] = np.sqrt(rng.chisquare(df - np.arange(dim)))
    return T @ T.T


def factor(cov: np.ndarray) -> np.ndarray:
    """A square root ``L`` with ``L L' = cov`` that tolerates singular blocks."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(w, 0.0, None))


def mvn_gram(n: int, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gram matrix of ``[1 | Z]`` for ``n`` i.i.d. rows ``Z ~ N(0, cov)``.

    Uses the independence of the sample mean and the centred scatter matrix.
    """
    d = cov.shape[0]
    L = factor(cov)
    zbar = L @ rng.standard_normal(d) / np.sqrt(n)
    S = L @ standard_wishart(n - 1, d, rng) @ L.T
    G = np.empty((d + 1, d + 1))
    G[0, 0] = n
    G[0, 1:] = G[1:, 0] = n * zbar
    G[1:, 1:] = S + n * np.outer(zbar, zbar)
    return G


def conditional_gram(XX: np.ndarray, coef: np.ndarray, noise_factor: np.ndarray,
                     n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``X'W`` and ``W'W`` for ``W = X coef + N noise_factor'``.

    ``X`` is a fixed ``n x k`` design known only through ``XX = X'X``; rows of
    ``N`` are i.i.d. standard normal.  ``X = Q R`` splits ``N`` into ``Q'N``
    (k x q standard normal) and a residual scatter ``~ Wishart(n - k, I)``,
    independent of each other.
    """
    k = XX.shape[0]
    q = noise_factor.shape[1]
    R = linalg.cholesky(XX, lower=False)  # XX = R'R
    H = rng.standard_normal((k, q))
    W0 = standard_wishart(n - k, q, rng)
    Lt = noise_factor.T
    XN = R.T @ H @ Lt  # X'(N L')
    NN = Lt.T @ (H.T @ H + W0) @ Lt
    XW = XX @ coef + XN
    cross = coef.T @ XN
    WW = coef.T @ XX @ coef + cross + cross.T + NN
    return XW, 0.5 * (WW + WW.T)


def mediation_gram(XX: np.ndarray, alpha: np.ndarray, beta_x: np.ndarray, beta_m: np.ndarray,
                   Sigma_m: np.ndarray, sigma_e2: float, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Gram matrix of ``[X | M | Y]`` given ``X'X`` under the linear mediation model.

    ``M = X alpha + E`` with ``E`` rows ~ N(0, Sigma_m) and
    ``Y = M beta_m + X beta_x + e`` with ``e ~ N(0, sigma_e2)``; ``alpha`` is
    ``k x p_m`` and ``beta_x`` has length ``k``.
    """
    k, p = alpha.shape
    coef = np.column_stack([alpha, alpha @ beta_m + beta_x])
    base = np.zeros((p + 1, p + 1))
    base[:p, :p] = factor(Sigma_m)
    base[p, p] = np.sqrt(max(sigma_e2, 0.0))
    T = np.eye(p + 1)
    T[:p, p] = beta_m
    XW, WW = conditional_gram(XX, coef, T.T @ base, n, rng)
    G = np.empty((k + p + 1, k + p + 1))
    G[:k, :k] = XX
    G[:k, k:] = XW
    G[k:, :k] = XW.T
    G[k:, k:] = WW
    return G

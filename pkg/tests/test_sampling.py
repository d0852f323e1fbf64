"""Gram-matrix samplers against brute-force row simulation."""

import numpy as np
import pytest
from scipy import stats

from medfuse.sampling import conditional_gram, factor, mediation_gram, mvn_gram, standard_wishart

REPS = 4000


def test_wishart_moments():
    rng = np.random.default_rng(0)
    df, d = 7, 3
    W = np.array([standard_wishart(df, d, rng) for _ in range(REPS)])
    np.testing.assert_allclose(W.mean(axis=0), df * np.eye(d), atol=0.25)
    # Var(W_ii) = 2 df, Var(W_ij) = df
    assert W[:, 0, 0].var() == pytest.approx(2 * df, rel=0.1)
    assert W[:, 0, 2].var() == pytest.approx(df, rel=0.1)


def test_wishart_rejects_small_df():
    with pytest.raises(ValueError):
        standard_wishart(2, 3, np.random.default_rng(0))


def test_factor_handles_singular():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = factor(cov)
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-12)


def _rows_gram(n, cov, rng):
    Z = rng.multivariate_normal(np.zeros(len(cov)), cov, size=n)
    X = np.column_stack([np.ones(n), Z])
    return X.T @ X


def test_mvn_gram_matches_rows():
    cov = np.array([[1.0, 0.4, 0.0], [0.4, 2.0, -0.3], [0.0, -0.3, 0.5]])
    n = 12
    rng = np.random.default_rng(1)
    fast = np.array([mvn_gram(n, cov, rng) for _ in range(REPS)])
    slow = np.array([_rows_gram(n, cov, rng) for _ in range(REPS)])
    for i, j in [(0, 1), (1, 1), (1, 2), (2, 3), (3, 3)]:
        assert stats.ks_2samp(fast[:, i, j], slow[:, i, j]).pvalue > 1e-3, (i, j)
    np.testing.assert_allclose(fast.mean(axis=0)[1:, 1:], n * cov, atol=0.3)
    assert np.all(fast[:, 0, 0] == n)


def test_conditional_gram_matches_rows():
    rng = np.random.default_rng(2)
    n, k = 15, 2
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    coef = np.array([[0.5, -1.0], [2.0, 0.3]])
    Lf = np.array([[1.0, 0.0], [0.6, 0.8]])
    XX = X.T @ X
    fast_xw, fast_ww, slow_xw, slow_ww = [], [], [], []
    for _ in range(REPS):
        a, b = conditional_gram(XX, coef, Lf, n, rng)
        fast_xw.append(a)
        fast_ww.append(b)
        W = X @ coef + rng.standard_normal((n, 2)) @ Lf.T
        slow_xw.append(X.T @ W)
        slow_ww.append(W.T @ W)
    fast_xw, fast_ww = np.array(fast_xw), np.array(fast_ww)
    slow_xw, slow_ww = np.array(slow_xw), np.array(slow_ww)
    for i, j in [(0, 0), (1, 1), (0, 1)]:
        assert stats.ks_2samp(fast_xw[:, i, j], slow_xw[:, i, j]).pvalue > 1e-3
        assert stats.ks_2samp(fast_ww[:, i, j], slow_ww[:, i, j]).pvalue > 1e-3
    # joint structure: correlation between a cross-product and a scatter entry
    cf = np.corrcoef(fast_xw[:, 1, 0], fast_ww[:, 0, 1])[0, 1]
    cs = np.corrcoef(slow_xw[:, 1, 0], slow_ww[:, 0, 1])[0, 1]
    assert cf == pytest.approx(cs, abs=0.06)


def test_conditional_gram_noise_free_is_deterministic():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    coef = np.array([[1.0], [2.0]])
    XW, WW = conditional_gram(X.T @ X, coef, np.zeros((1, 1)), 6, rng)
    W = X @ coef
    np.testing.assert_allclose(XW, X.T @ W, atol=1e-12)
    np.testing.assert_allclose(WW, W.T @ W, atol=1e-10)


def test_mediation_gram_matches_rows():
    rng = np.random.default_rng(4)
    n = 20
    X = np.column_stack([rng.standard_normal(n), np.ones(n)])
    XX = X.T @ X
    alpha = np.array([[0.5, -0.2], [0.1, 0.3]])
    beta_x = np.array([0.4, -0.1])
    beta_m = np.array([1.0, 0.5])
    S = np.array([[1.0, 0.3], [0.3, 0.7]])
    s2 = 0.6
    fast, slow = [], []
    L = np.linalg.cholesky(S)
    for _ in range(REPS):
        fast.append(mediation_gram(XX, alpha, beta_x, beta_m, S, s2, n, rng))
        M = X @ alpha + rng.standard_normal((n, 2)) @ L.T
        Y = M @ beta_m + X @ beta_x + np.sqrt(s2) * rng.standard_normal(n)
        Z = np.column_stack([X, M, Y])
        slow.append(Z.T @ Z)
    fast, slow = np.array(fast), np.array(slow)
    np.testing.assert_array_equal(fast[:, :2, :2], np.broadcast_to(XX, (REPS, 2, 2)))
    for i, j in [(0, 2), (0, 4), (2, 4), (3, 3), (4, 4), (2, 3)]:
        assert stats.ks_2samp(fast[:, i, j], slow[:, i, j]).pvalue > 1e-3, (i, j)
    np.testing.assert_allclose(fast.mean(axis=0), slow.mean(axis=0), rtol=0.05, atol=0.4)

"""Random instances and independent reference optimizers for the tests.

The reference optimizers work on the raw data arrays with generic
quasi-Newton minimization; they share no code with the package estimators.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg, optimize, stats

from medfuse.core import ExternalSummary, InternalDataset


def random_dataset(rng, n=60, p_m=3, p_c=2, sigma_e=1.0, alpha_scale=0.6, beta_scale=0.5):
    """Mediation data with an intercept as the first of ``p_c`` confounder columns."""
    Cx = rng.standard_normal((n, p_c - 1))
    C = np.column_stack([np.ones(n), Cx])
    A = 0.4 * Cx.sum(axis=1) + rng.standard_normal(n)
    alpha_a = alpha_scale * rng.standard_normal(p_m)
    alpha_c = 0.3 * rng.standard_normal((p_m, p_c))
    L = np.tril(0.3 * rng.standard_normal((p_m, p_m)), -1) + np.diag(rng.uniform(0.6, 1.2, p_m))
    M = np.outer(A, alpha_a) + C @ alpha_c.T + rng.standard_normal((n, p_m)) @ L.T
    beta_m = beta_scale * rng.standard_normal(p_m)
    beta_c = 0.3 * rng.standard_normal(p_c)
    Y = M @ beta_m + 0.7 * A + C @ beta_c + sigma_e * rng.standard_normal(n)
    return InternalDataset(Y=Y, M=M, A=A, C=C)


def random_external(rng, data, shift=0.3, var=0.01):
    X = np.column_stack([data.A, data.C])
    te = np.linalg.lstsq(X, data.Y, rcond=None)[0][0]
    return ExternalSummary(float(te + shift * rng.standard_normal()), var)


def _unpack(x, p_m, p_c, with_beta_a):
    i = 0
    aa = x[i:i + p_m]; i += p_m
    ac = x[i:i + p_m * p_c].reshape(p_m, p_c); i += p_m * p_c
    ba = None
    if with_beta_a:
        ba = x[i]; i += 1
    bm = x[i:i + p_m]; i += p_m
    bc = x[i:i + p_c]; i += p_c
    return aa, ac, ba, bm, bc, x[i:]


def _start(d, with_beta_a):
    X = np.column_stack([d.A, d.C])
    alpha = np.linalg.lstsq(X, d.M, rcond=None)[0]
    Z = np.column_stack([d.A, d.M, d.C])
    b = np.linalg.lstsq(Z, d.Y, rcond=None)[0]
    parts = [alpha[0], alpha[1:].T.ravel()]
    parts += [b[:1]] if with_beta_a else []
    parts += [b[1:1 + d.p_m], b[1 + d.p_m:]]
    return np.concatenate(parts)


def _mediator_profile(d, aa, ac):
    R = d.M - np.outer(d.A, aa) - d.C @ ac.T
    S = R.T @ R / d.n
    return S, 0.5 * d.n * np.linalg.slogdet(S)[1]


def _minimize(f, x0):
    res = optimize.minimize(f, x0, method="BFGS", jac="3-point",
                            options={"gtol": 1e-9, "maxiter": 20000})
    res = optimize.minimize(f, res.x, method="BFGS", jac="3-point",
                            options={"gtol": 1e-10, "maxiter": 20000})
    return res


def oracle_unconstrained(d):
    """Profile likelihood (Sigma and sigma^2 concentrated out) maximized by BFGS."""
    def nll(x):
        aa, ac, ba, bm, bc, _ = _unpack(x, d.p_m, d.p_c, True)
        _, med = _mediator_profile(d, aa, ac)
        r = d.Y - d.M @ bm - ba * d.A - d.C @ bc
        return med + 0.5 * d.n * np.log(r @ r / d.n)

    res = _minimize(nll, _start(d, True))
    aa, ac, ba, bm, bc, _ = _unpack(res.x, d.p_m, d.p_c, True)
    S, _ = _mediator_profile(d, aa, ac)
    r = d.Y - d.M @ bm - ba * d.A - d.C @ bc
    return dict(alpha_a=aa, alpha_c=ac, Sigma_m=S, beta_a=ba, beta_m=bm, beta_c=bc,
                sigma_e2=r @ r / d.n)


def full_nll_hard(d, theta, aa, ac, S, bm, bc, s2):
    """Unprofiled negative log-likelihood with the total effect pinned at ``theta``."""
    R = d.M - np.outer(d.A, aa) - d.C @ ac.T
    med = -stats.multivariate_normal(np.zeros(d.p_m), S).logpdf(R).sum()
    r = d.Y - d.M @ bm - (theta - aa @ bm) * d.A - d.C @ bc
    return med - stats.norm(0, np.sqrt(s2)).logpdf(r).sum()


def oracle_hard(d, theta):
    def nll(x):
        aa, ac, _, bm, bc, _ = _unpack(x, d.p_m, d.p_c, False)
        _, med = _mediator_profile(d, aa, ac)
        r = d.Y - d.M @ bm - (theta - aa @ bm) * d.A - d.C @ bc
        return med + 0.5 * d.n * np.log(r @ r / d.n)

    res = _minimize(nll, _start(d, False))
    aa, ac, _, bm, bc, _ = _unpack(res.x, d.p_m, d.p_c, False)
    S, _ = _mediator_profile(d, aa, ac)
    r = d.Y - d.M @ bm - (theta - aa @ bm) * d.A - d.C @ bc
    return dict(alpha_a=aa, alpha_c=ac, Sigma_m=S, beta_a=theta - aa @ bm, beta_m=bm,
                beta_c=bc, sigma_e2=r @ r / d.n)


def soft_marginal_loglik_dense(d, ext, tau, aa, ac, S, bm, bc, s2):
    """Integrated likelihood with an explicit n x n outcome covariance."""
    R = d.M - np.outer(d.A, aa) - d.C @ ac.T
    med = stats.multivariate_normal(np.zeros(d.p_m), S).logpdf(R).sum()
    r = d.Y - d.M @ bm - (ext.theta_hat_E - aa @ bm) * d.A - d.C @ bc
    cov = s2 * np.eye(d.n) + tau * np.outer(d.A, d.A)
    return med + stats.multivariate_normal(np.zeros(d.n), cov).logpdf(r)


def oracle_soft(d, ext, s2_prior):
    tau = s2_prior * ext.var_theta_hat_E

    def nll(x):
        aa, ac, _, bm, bc, rest = _unpack(x, d.p_m, d.p_c, False)
        _, med = _mediator_profile(d, aa, ac)
        r = d.Y - d.M @ bm - (ext.theta_hat_E - aa @ bm) * d.A - d.C @ bc
        cov = np.exp(rest[0]) * np.eye(d.n) + tau * np.outer(d.A, d.A)
        fac = linalg.cho_factor(cov)
        logdet = 2 * np.sum(np.log(np.diag(fac[0])))
        return med + 0.5 * (logdet + r @ linalg.cho_solve(fac, r))

    x0 = _start(d, False)
    aa, ac, _, bm, bc, _ = _unpack(x0, d.p_m, d.p_c, False)
    r = d.Y - d.M @ bm - (ext.theta_hat_E - aa @ bm) * d.A - d.C @ bc
    res = _minimize(nll, np.append(x0, np.log(r @ r / d.n)))
    aa, ac, _, bm, bc, rest = _unpack(res.x, d.p_m, d.p_c, False)
    S, _ = _mediator_profile(d, aa, ac)
    s2 = float(np.exp(rest[0]))
    return dict(alpha_a=aa, alpha_c=ac, Sigma_m=S, beta_m=bm, beta_c=bc, sigma_e2=s2,
                loglik=soft_marginal_loglik_dense(d, ext, tau, aa, ac, S, bm, bc, s2))


PARAMS = ("alpha_a", "alpha_c", "Sigma_m", "beta_m", "beta_c", "sigma_e2")


def max_param_diff(fit, ref, names=PARAMS) -> float:
    return max(float(np.max(np.abs(np.asarray(getattr(fit, k)) - np.asarray(ref[k]))))
               for k in names)

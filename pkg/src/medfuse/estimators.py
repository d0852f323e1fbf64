"""Unconstrained, hard-constraint and soft-constraint mediation estimators.

All three work on :class:`~medfuse.core.SuffStats`.  The hard-constraint fit
cycles exact conditional minimizers of the negative log-likelihood with the
outcome model's exposure coefficient tied to ``theta_E - alpha_a'beta_m``.
The soft-constraint fit treats the internal total effect as a normal random
effect centred at the external estimate and runs EM, using the same cyclic
updates (with the posterior mean in place of ``theta_E``) as its M-step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import (
    ExternalSummary,
    InternalDataset,
    MediationFit,
    Method,
    SuffStats,
    TEModelFit,
    check_exposure,
    fit_te_model,
    suff_stats,
)
from .errors import NoConvergence, RankDeficient, ValidationError

LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class HardConfig:
    ccd_tol: float = 1e-10
    ccd_max_iter: int = 10_000

    def __post_init__(self):
        if not (self.ccd_tol > 0 and self.ccd_max_iter > 0):
            raise ValidationError("HardConfig tolerances must be positive")


@dataclass(frozen=True)
class SoftConfig:
    """Soft-constraint settings.

    ``s2`` is either a fixed nonnegative prior scale or ``"eb"`` for the
    empirical-Bayes rule.  A zero scale (fixed or estimated) is replaced by
    ``eps_s2``.
    """

    s2: float | str = "eb"
    eps_s2: float = 1e-6
    em_tol: float = 1e-10
    em_max_iter: int = 5000
    inner_ccd_tol: float = 1e-8
    inner_ccd_max_iter: int = 1000

    def __post_init__(self):
        if isinstance(self.s2, str):
            if self.s2.lower() != "eb":
                raise ValidationError(f"s2 must be a number or 'eb', got {self.s2!r}")
            object.__setattr__(self, "s2", "eb")
        elif not (float(self.s2) >= 0 and np.isfinite(self.s2)):
            raise ValidationError("fixed s2 must be a finite nonnegative number")
        if not all(v > 0 for v in (self.eps_s2, self.em_tol, self.em_max_iter,
                                    self.inner_ccd_tol, self.inner_ccd_max_iter)):
            raise ValidationError("SoftConfig tolerances must be positive")

    @property
    def empirical_bayes(self) -> bool:
        return self.s2 == "eb"


class _Params:
    """Mutable working copy of the model parameters used by the cyclic updates.

    ``Bc`` is ``alpha_c`` transposed (``p_c x p_m``), matching the regression
    layout ``M ~ A alpha_a' + C Bc``.
    """

    __slots__ = ("aa", "Bc", "Sigma", "bc", "bm", "s2")

    def __init__(self, aa, Bc, Sigma, bc, bm, s2):
        self.aa, self.Bc, self.Sigma, self.bc, self.bm, self.s2 = aa, Bc, Sigma, bc, bm, s2

    @classmethod
    def from_fit(cls, fit: MediationFit) -> _Params:
        return cls(fit.alpha_a.copy(), fit.alpha_c.T.copy(), fit.Sigma_m.copy(),
                   fit.beta_c.copy(), fit.beta_m.copy(), float(fit.sigma_e2))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.aa, self.Bc.ravel(), self.Sigma.ravel(),
                               self.bc, self.bm, [self.s2]])


def _mediator_sscp(st: SuffStats, aa: np.ndarray, Bc: np.ndarray) -> np.ndarray:
    """Residual cross-products ``(M - X alpha)'(M - X alpha)`` with X = [A | C]."""
    K = np.vstack([aa, Bc])
    XMK = st.XM.T @ K
    S = st.MM - XMK - XMK.T + K.T @ st.XX @ K
    return 0.5 * (S + S.T)


def _outcome_weights(st: SuffStats, a_coef: float, bc: np.ndarray, bm: np.ndarray) -> np.ndarray:
    """Column weights w with ``[A C M Y] w = Y - a_coef A - C bc - M bm``."""
    return np.concatenate([[-a_coef], -bc, -bm, [1.0]])


def _logdet_and_solve(Sigma: np.ndarray):
    try:
        fac = linalg.cho_factor(Sigma, check_finite=False)
    except linalg.LinAlgError as exc:
        raise RankDeficient("mediator covariance estimate is singular") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
    return logdet, fac


def _mediator_loglik(st: SuffStats, p: _Params) -> float:
    logdet, fac = _logdet_and_solve(p.Sigma)
    S = _mediator_sscp(st, p.aa, p.Bc)
    tr = float(np.trace(linalg.cho_solve(fac, S, check_finite=False)))
    return -0.5 * (st.n * st.p_m * LOG2PI + st.n * logdet + tr)


def constrained_nll(st: SuffStats, p: _Params, target: float, extra: float = 0.0) -> float:
    """Negative log-likelihood of the model whose TE is pinned at ``target``.

    ``extra`` adds ``A'A Var[theta]`` to the outcome residual sum of squares,
    which turns this into the negative EM Q-function for the soft model.
    """
    w = _outcome_weights(st, target - p.aa @ p.bm, p.bc, p.bm)
    rss = st.quad(w) + extra
    out = 0.5 * (st.n * (LOG2PI + np.log(p.s2)) + rss / p.s2)
    return out - _mediator_loglik(st, p)


def _ccd_sweep(st: SuffStats, p: _Params, target: float, extra: float) -> None:
    n = st.n
    # alpha_c | alpha_a
    p.Bc = linalg.cho_solve(st.CC_factor, st.CM - np.outer(st.AC, p.aa), check_finite=False)
    # alpha_a | rest; (Sigma^-1 + b b'/s2)^-1 applied through Sherman-Morrison
    u = st.AM - p.Bc.T @ st.AC
    q = st.AY - target * st.AA - st.AM @ p.bm - st.AC @ p.bc
    g = p.Sigma @ p.bm
    c = p.bm @ g
    p.aa = (u - g * ((p.bm @ u + q) / (p.s2 + c))) / st.AA
    # Sigma_m
    p.Sigma = _mediator_sscp(st, p.aa, p.Bc) / n
    # beta_c
    nie = p.aa @ p.bm
    p.bc = linalg.cho_solve(st.CC_factor, st.CY - (target - nie) * st.AC - st.CM @ p.bm,
                            check_finite=False)
    # beta_m: regress Y - target A - C bc on M - A alpha_a'
    aa = p.aa
    DD = st.MM - np.outer(st.AM, aa) - np.outer(aa, st.AM) + st.AA * np.outer(aa, aa)
    rhs = (st.MY - target * st.AM - st.CM.T @ p.bc
           - aa * (st.AY - target * st.AA - st.AC @ p.bc))
    try:
        p.bm = linalg.solve(DD, rhs, assume_a="pos", check_finite=False)
    except linalg.LinAlgError as exc:
        raise RankDeficient("mediator residual cross-product is singular") from exc
    # sigma_e^2
    w = _outcome_weights(st, target - p.aa @ p.bm, p.bc, p.bm)
    p.s2 = max((st.quad(w) + extra) / n, 0.0)


def _run_ccd(st, p, target, extra, tol, max_iter, trace=None, raise_on_fail=True):
    delta = np.inf
    old = p.vector()
    for it in range(1, max_iter + 1):
        _ccd_sweep(st, p, target, extra)
        new = p.vector()
        delta = float(np.max(np.abs(new - old) / (1.0 + np.abs(new))))
        old = new
        if trace is not None:
            trace.append(constrained_nll(st, p, target, extra))
        if delta < tol:
            return it
    if raise_on_fail:
        raise NoConvergence(max_iter, delta, what="coordinate descent")
    return max_iter


def _prepare(data) -> SuffStats:
    st = suff_stats(data)
    check_exposure(st)
    return st


def fit_unconstrained(data: InternalDataset | SuffStats) -> MediationFit:
    """Closed-form MLE of the outcome and mediator models (no external input)."""
    st = _prepare(data)
    k = 1 + st.p_c + st.p_m
    G = st.gram
    try:
        fac = linalg.cho_factor(G[:k, :k])
    except linalg.LinAlgError as exc:
        raise RankDeficient("design [A | C | M] is not of full column rank") from exc
    beta = linalg.cho_solve(fac, G[:k, -1])
    sigma_e2 = max(st.YY - beta @ G[:k, -1], 0.0) / st.n

    kx = 1 + st.p_c
    try:
        alpha = linalg.cho_solve(linalg.cho_factor(st.XX), st.XM)
    except linalg.LinAlgError as exc:
        raise RankDeficient("[A | C] is not of full column rank") from exc
    Sigma = _mediator_sscp(st, alpha[0], alpha[1:]) / st.n

    beta_a = float(beta[0])
    beta_m = beta[kx:]
    p = _Params(alpha[0], alpha[1:], Sigma, beta[1:kx], beta_m, sigma_e2)
    loglik = _unconstrained_loglik(st, p)
    return _to_fit(p, te=beta_a + float(alpha[0] @ beta_m), method=Method.UNCONSTRAINED,
                   loglik=loglik, beta_a=beta_a)


def _unconstrained_loglik(st: SuffStats, p: _Params) -> float:
    if p.s2 <= 0:
        return np.inf
    med = _mediator_loglik(st, p)
    return med - 0.5 * st.n * (LOG2PI + np.log(p.s2) + 1.0)


def _to_fit(p: _Params, te: float, method: Method, loglik: float,
            beta_a: float | None = None, s2_used=None, n_iter=0) -> MediationFit:
    nie = float(p.aa @ p.bm)
    if beta_a is None:
        beta_a = te - nie
    Sigma = 0.5 * (p.Sigma + p.Sigma.T)
    return MediationFit(
        alpha_a=p.aa.copy(),
        alpha_c=p.Bc.T.copy(),
        Sigma_m=Sigma,
        beta_a=float(beta_a),
        beta_m=p.bm.copy(),
        beta_c=p.bc.copy(),
        sigma_e2=float(p.s2),
        te=float(te),
        method=method,
        loglik=float(loglik),
        s2_used=s2_used,
        n_iter=n_iter,
    )


def fit_hard_constraint(data: InternalDataset | SuffStats, ext: ExternalSummary,
                        cfg: HardConfig = HardConfig(), *,
                        init: MediationFit | None = None,
                        trace: list | None = None) -> MediationFit:
    """Constrained MLE with the total effect fixed at ``ext.theta_hat_E``.

    Starts from the unconstrained fit unless ``init`` is given.  If ``trace``
    is a list, the negative log-likelihood after every sweep is appended.
    """
    st = _prepare(data)
    start = init if init is not None else fit_unconstrained(st)
    p = _Params.from_fit(start)
    theta = float(ext.theta_hat_E)
    if trace is not None:
        trace.append(constrained_nll(st, p, theta))
    it = _run_ccd(st, p, theta, 0.0, cfg.ccd_tol, cfg.ccd_max_iter, trace)
    loglik = -constrained_nll(st, p, theta)
    return _to_fit(p, te=theta, method=Method.HARD, loglik=loglik, n_iter=it)


def eb_s2(te_fit: TEModelFit, ext: ExternalSummary) -> float:
    """Empirical-Bayes prior scale from the internal/external TE discrepancy."""
    gap = (te_fit.theta_a - ext.theta_hat_E) ** 2 - te_fit.var_theta_a
    return max(0.0, gap) / ext.var_theta_hat_E


def _posterior(st: SuffStats, p: _Params, ext: ExternalSummary, tau: float):
    """Normal posterior (mean, variance) of the latent internal TE."""
    a_ystar = st.AY - st.AM @ p.bm - st.AC @ p.bc + st.AA * (p.aa @ p.bm)
    if p.s2 <= 0:
        return a_ystar / st.AA, 0.0
    prec = st.AA / p.s2 + 1.0 / tau
    mean = (a_ystar / p.s2 + ext.theta_hat_E / tau) / prec
    return float(mean), float(1.0 / prec)


def soft_marginal_loglik(st: SuffStats, p: _Params, ext: ExternalSummary, tau: float) -> float:
    """Log-likelihood with the latent TE integrated out.

    With ``r = Y - M bm - C bc + A(alpha_a'bm - theta_E)`` the outcome block is
    ``r ~ N(0, s2 I + tau A A')``; determinant and inverse follow from the
    rank-one update formulas.
    """
    w = _outcome_weights(st, ext.theta_hat_E - p.aa @ p.bm, p.bc, p.bm)
    rr = st.quad(w)
    ar = float(st.gram[0] @ w)
    s2, n, AA = p.s2, st.n, st.AA
    if s2 <= 0:
        return np.inf
    out = -0.5 * (n * (LOG2PI + np.log(s2)) + np.log1p(tau * AA / s2)
                  + (rr - tau * ar * ar / (s2 + tau * AA)) / s2)
    return out + _mediator_loglik(st, p)


def resolve_s2(st: SuffStats, ext: ExternalSummary, cfg: SoftConfig) -> float:
    s2 = eb_s2(fit_te_model(st), ext) if cfg.empirical_bayes else float(cfg.s2)
    return s2 if s2 > 0 else cfg.eps_s2


def fit_soft_constraint(data: InternalDataset | SuffStats, ext: ExternalSummary,
                        cfg: SoftConfig = SoftConfig(), *,
                        init: MediationFit | None = None,
                        trace: list | None = None) -> MediationFit:
    """EM fit of the random-total-effect (soft constraint) model.

    The reported ``te`` is the posterior mean of the latent total effect at
    the fitted parameters; ``s2_used`` is the prior scale actually applied.
    If ``trace`` is a list, the marginal log-likelihood after each EM
    iteration is appended (starting value first).
    """
    st = _prepare(data)
    s2 = resolve_s2(st, ext, cfg)
    tau = s2 * ext.var_theta_hat_E
    start = init if init is not None else fit_unconstrained(st)
    p = _Params.from_fit(start)
    ll = soft_marginal_loglik(st, p, ext, tau)
    if trace is not None:
        trace.append(ll)
    # outcome noise at rounding level: likelihood unbounded, TE pinned by the data
    noise_floor = 64 * np.finfo(float).eps * max(st.YY / st.n, np.finfo(float).tiny)
    delta = np.inf
    for it in range(1, cfg.em_max_iter + 1):
        if p.s2 <= noise_floor:
            p.s2, ll, delta = 0.0, np.inf, 0.0
            break
        mean, var = _posterior(st, p, ext, tau)
        _run_ccd(st, p, mean, st.AA * var, cfg.inner_ccd_tol, cfg.inner_ccd_max_iter,
                 raise_on_fail=False)
        ll_new = soft_marginal_loglik(st, p, ext, tau)
        if trace is not None:
            trace.append(ll_new)
        delta = 0.0 if ll_new == ll else abs(ll_new - ll) / max(1.0, abs(ll_new))
        ll = ll_new
        if delta < cfg.em_tol:
            break
    else:
        raise NoConvergence(cfg.em_max_iter, delta, what="EM")
    te, _ = _posterior(st, p, ext, tau)
    return _to_fit(p, te=te, method=Method.SOFT, loglik=ll, s2_used=s2, n_iter=it)


def extract_effects(fit: MediationFit) -> tuple[float, float, float]:
    """(NDE, NIE, TE) with NDE defined as TE - NIE."""
    nie = float(fit.alpha_a @ fit.beta_m)
    te = float(fit.te)
    return te - nie, nie, te


def fit(data, ext: ExternalSummary | None, method: Method | str, *,
        hard: HardConfig = HardConfig(), soft: SoftConfig = SoftConfig()) -> MediationFit:
    """Dispatch to one of the three estimators by method tag."""
    method = Method(method)
    if method is Method.UNCONSTRAINED:
        return fit_unconstrained(data)
    if ext is None:
        raise ValidationError(f"method {method.value!r} needs an external summary")
    if method is Method.HARD:
        return fit_hard_constraint(data, ext, hard)
    return fit_soft_constraint(data, ext, soft)

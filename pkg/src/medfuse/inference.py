"""Asymptotic variances, the composite-null law, Wald pre-test and intervals.

Variances are for ``sqrt(n)``-scaled estimation errors and are evaluated at
plug-in estimates: the fitted ``Sigma_m``, ``sigma_e2`` and the residual
exposure variance ``sigma_a2 = A_r'A_r / n``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg, stats

from .core import ExternalSummary, InternalDataset, MediationFit, Method, SuffStats, suff_stats
from .errors import NoConvergence, SingularSigmaM, ValidationError
from .estimators import SoftConfig, extract_effects, fit_soft_constraint, fit_unconstrained
from .sampling import mediation_gram

MIN_MIXTURE_DRAWS = 1_000_000


class IntervalKind(str, Enum):
    ASYMPTOTIC = "asymptotic_normal"
    BOOTSTRAP = "parametric_bootstrap"
    MIXTURE = "mixture_null"


@dataclass(frozen=True)
class AsymptoticVariances:
    """Asymptotic variances of ``sqrt(n)(estimate - truth)``; ``None`` where no closed form exists."""

    avar_nde: float | None
    avar_nie: float
    avar_te: float | None
    partial_r2: float
    method: Method

    def __post_init__(self):
        if not 0.0 <= self.partial_r2 <= 1.0:
            raise ValidationError(f"partial R^2 {self.partial_r2} outside [0, 1]")
        for v in (self.avar_nde, self.avar_nie, self.avar_te):
            if v is not None and v < 0:
                raise ValidationError("asymptotic variances must be nonnegative")


@dataclass(frozen=True)
class IntervalEstimate:
    lower: float
    upper: float
    level: float
    kind: IntervalKind

    def __post_init__(self):
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        if not self.lower <= self.upper:
            raise ValidationError(f"interval bounds out of order: {self.lower} > {self.upper}")
        if not 0 < self.level < 1:
            raise ValidationError("level must lie in (0, 1)")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    dof: int
    p_value: float


def _sigma_terms(fit: MediationFit):
    """``alpha' Sigma^-1 alpha`` and ``beta' Sigma beta``."""
    S = np.asarray(fit.Sigma_m)
    try:
        fac = linalg.cho_factor(S)
    except linalg.LinAlgError as exc:
        raise SingularSigmaM("Sigma_m is not positive definite") from exc
    a = np.asarray(fit.alpha_a)
    b = np.asarray(fit.beta_m)
    return float(a @ linalg.cho_solve(fac, a)), float(b @ S @ b)


def _r2(bsb: float, sigma_e2: float) -> float:
    total = sigma_e2 + bsb
    return bsb / total if total > 0 else 0.0


def _check_method(fit: MediationFit, expected: Method):
    if Method(fit.method) is not expected:
        raise ValidationError(f"expected a {expected.value} fit, got {Method(fit.method).value}")


def avar_unconstrained(fit: MediationFit, sigma_a2: float) -> AsymptoticVariances:
    _check_method(fit, Method.UNCONSTRAINED)
    asa, bsb = _sigma_terms(fit)
    se2 = fit.sigma_e2
    shared = se2 * asa
    return AsymptoticVariances(
        avar_nde=se2 / sigma_a2 + shared,
        avar_nie=bsb / sigma_a2 + shared,
        avar_te=(se2 + bsb) / sigma_a2,
        partial_r2=_r2(bsb, se2),
        method=Method.UNCONSTRAINED,
    )


def avar_hard(fit: MediationFit, sigma_a2: float) -> AsymptoticVariances:
    _check_method(fit, Method.HARD)
    asa, bsb = _sigma_terms(fit)
    se2 = fit.sigma_e2
    r2 = _r2(bsb, se2)
    shared = se2 * asa
    return AsymptoticVariances(
        avar_nde=se2 / sigma_a2 * r2 + shared,
        avar_nie=bsb / sigma_a2 * (1 - r2) + shared,
        avar_te=None,
        partial_r2=r2,
        method=Method.HARD,
    )


def avar_soft(fit: MediationFit, sigma_a2: float, tau_a2: float) -> AsymptoticVariances:
    """NIE variance of the soft-constraint estimator with prior variance ``tau_a2``.

    ``tau_a2`` is on the ``sqrt(n)`` scale, i.e. ``n * s2 * Var(theta_E)``.
    """
    _check_method(fit, Method.SOFT)
    if not tau_a2 > 0:
        raise ValidationError("tau_a2 must be positive")
    asa, bsb = _sigma_terms(fit)
    se2 = fit.sigma_e2
    # written to stay finite as tau_a2 -> 0: (1/t)(s/e + 1/t)^-1 = 1/(t s/e + 1)
    shrink = 1.0 / (tau_a2 * sigma_a2 / se2 + 1.0) if se2 > 0 else 0.0
    bracket = 1.0 + shrink * bsb / se2 if se2 > 0 else 1.0
    return AsymptoticVariances(
        avar_nde=None,
        avar_nie=bsb / sigma_a2 / bracket + se2 * asa,
        avar_te=None,
        partial_r2=_r2(bsb, se2),
        method=Method.SOFT,
    )


def estimate_partial_r2(fit_u: MediationFit) -> float:
    _check_method(fit_u, Method.UNCONSTRAINED)
    b = np.asarray(fit_u.beta_m)
    return _r2(float(b @ fit_u.Sigma_m @ b), fit_u.sigma_e2)


def mixture_null_draws(p_m: int, sigma_e2: float, sigma_a2: float, n_draws: int = MIN_MIXTURE_DRAWS,
                       seed=None) -> np.ndarray:
    """Draws of ``0.5 sqrt(sigma_e2/sigma_a2) (xi_1 - xi_2)``, ``xi_i ~ chi2(p_m)``."""
    if n_draws < MIN_MIXTURE_DRAWS:
        raise ValidationError(f"n_draws must be at least {MIN_MIXTURE_DRAWS}")
    rng = np.random.default_rng(seed)
    xi = rng.chisquare(p_m, size=(2, int(n_draws)))
    return 0.5 * math.sqrt(sigma_e2 / sigma_a2) * (xi[0] - xi[1])


def mixture_null_quantiles(p_m: int, sigma_e2: float, sigma_a2: float, probs,
                           n_draws: int = MIN_MIXTURE_DRAWS, seed=None) -> list[float]:
    """Quantiles of the null law of ``n * NIE`` when ``alpha_a = beta_m = 0``."""
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)) or np.any(np.diff(probs) < 0):
        raise ValidationError("probs must be ascending values in (0, 1)")
    draws = mixture_null_draws(p_m, sigma_e2, sigma_a2, n_draws, seed)
    return [float(q) for q in np.quantile(draws, probs)]


def wald_null_test(fit: MediationFit, sigma_a2: float, n: int) -> WaldResult:
    """Joint Wald test of ``alpha_a = 0`` and ``beta_m = 0`` against chi2(2 p_m)."""
    asa, bsb = _sigma_terms(fit)
    if fit.sigma_e2 > 0:
        stat = n * (sigma_a2 * asa + bsb / fit.sigma_e2)
    else:
        stat = 0.0 if bsb == 0 and asa == 0 else math.inf
    dof = 2 * np.asarray(fit.alpha_a).size
    return WaldResult(float(stat), int(dof), float(stats.chi2.sf(stat, dof)))


def ci_asymptotic(point: float, avar: float, n: int, level: float = 0.95) -> IntervalEstimate:
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    half = stats.norm.ppf(0.5 + level / 2) * math.sqrt(max(avar, 0.0) / n)
    return IntervalEstimate(point - half, point + half, level, IntervalKind.ASYMPTOTIC)


def ci_mixture_nie(point: float, fit_u: MediationFit, sigma_a2: float, n: int,
                   level: float = 0.95, n_draws: int = MIN_MIXTURE_DRAWS,
                   seed=None) -> IntervalEstimate:
    """NIE interval obtained by inverting the composite-null law of ``n * NIE``."""
    lo_q, hi_q = mixture_null_quantiles(np.asarray(fit_u.alpha_a).size, fit_u.sigma_e2, sigma_a2,
                                        [0.5 - level / 2, 0.5 + level / 2], n_draws, seed)
    return IntervalEstimate(point - hi_q / n, point - lo_q / n, level, IntervalKind.MIXTURE)


@dataclass(frozen=True)
class BootstrapResult:
    nde: np.ndarray
    nie: np.ndarray
    te: np.ndarray

    def interval(self, effect: str, level: float) -> IntervalEstimate:
        x = getattr(self, effect)
        lo, hi = np.quantile(x, [0.5 - level / 2, 0.5 + level / 2])
        return IntervalEstimate(float(lo), float(max(lo, hi)), level, IntervalKind.BOOTSTRAP)


def bootstrap_rng(seed, index: int) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (index,))
    else:
        ss = np.random.SeedSequence(seed, spawn_key=(index,))
    return np.random.default_rng(ss)


def bootstrap_soft(data: InternalDataset | SuffStats, ext: ExternalSummary,
                   cfg: SoftConfig = SoftConfig(), B: int = 500, seed=None,
                   fit_s: MediationFit | None = None) -> BootstrapResult:
    """Parametric bootstrap of the soft-constraint estimator.

    Each replicate keeps the observed exposure and confounders, draws
    mediators and outcome from the fitted models with the fitted total
    effect in place of the internal TE, draws ``theta_E ~ N(theta_hat_E,
    Var(theta_hat_E))`` and refits (recomputing the empirical-Bayes scale
    when ``cfg`` asks for it).  Replicate ``b`` uses its own seed substream.
    """
    if B < 100:
        raise ValidationError("bootstrap needs B >= 100")
    st = suff_stats(data)
    if fit_s is None:
        fit_s = fit_soft_constraint(st, ext, cfg)
    alpha = np.vstack([fit_s.alpha_a, fit_s.alpha_c.T])
    beta_x = np.concatenate([[fit_s.te - fit_s.nie], fit_s.beta_c])
    sd_E = math.sqrt(ext.var_theta_hat_E)
    out = np.empty((3, B))
    for b in range(B):
        rng = bootstrap_rng(seed, b)
        G = mediation_gram(st.XX, alpha, beta_x, fit_s.beta_m, fit_s.Sigma_m,
                           fit_s.sigma_e2, st.n, rng)
        st_b = SuffStats(st.n, st.p_c, st.p_m, G)
        ext_b = ExternalSummary(ext.theta_hat_E + sd_E * rng.standard_normal(),
                                ext.var_theta_hat_E, ext.n_E)
        try:
            f = fit_soft_constraint(st_b, ext_b, cfg, init=fit_s)
        except NoConvergence as exc:
            raise NoConvergence(exc.iterations, exc.last_delta, exc.what, replicate=b) from exc
        out[:, b] = extract_effects(f)
    return BootstrapResult(*out)


def ci_bootstrap_soft_nde(data: InternalDataset | SuffStats, ext: ExternalSummary,
                          cfg: SoftConfig = SoftConfig(), B: int = 500, level: float = 0.95,
                          seed=None) -> IntervalEstimate:
    return bootstrap_soft(data, ext, cfg, B, seed).interval("nde", level)


@dataclass
class EffectInference:
    """Point estimates and intervals for one fitted model."""

    nde: float
    nie: float
    te: float
    intervals: dict = field(default_factory=dict)
    avar: AsymptoticVariances | None = None
    wald: WaldResult | None = None
    partial_r2: float = float("nan")
    sigma_a2: float = float("nan")
    notes: list = field(default_factory=list)


def infer_effects(fit: MediationFit, data: InternalDataset | SuffStats,
                  ext: ExternalSummary | None = None, *, level: float = 0.95,
                  soft: SoftConfig = SoftConfig(), bootstrap_B: int = 0, seed=None,
                  wald_pretest: bool = True, fit_u: MediationFit | None = None,
                  mixture_draws: int = MIN_MIXTURE_DRAWS) -> EffectInference:
    """Effects with intervals appropriate to the fitting method.

    Unconstrained and hard fits get normal intervals from their asymptotic
    variances (the hard TE interval is the single point ``theta_E``).  Soft
    fits get a normal NIE interval with ``tau_a2 = n s2 Var(theta_E)`` and,
    when ``bootstrap_B > 0``, bootstrap intervals for NDE and TE.  With
    ``wald_pretest`` a non-rejection of the no-mediation null at 0.05 swaps
    the NIE interval for one built from the composite-null law.
    """
    st = suff_stats(data)
    n, sigma_a2 = st.n, st.sigma_a2
    nde, nie, te = extract_effects(fit)
    method = Method(fit.method)
    fit_u = fit_u if fit_u is not None else (
        fit if method is Method.UNCONSTRAINED else fit_unconstrained(st))
    res = EffectInference(nde, nie, te, partial_r2=estimate_partial_r2(fit_u), sigma_a2=sigma_a2)

    if method is Method.UNCONSTRAINED:
        av = avar_unconstrained(fit, sigma_a2)
    elif method is Method.HARD:
        av = avar_hard(fit, sigma_a2)
    else:
        av = avar_soft(fit, sigma_a2, n * fit.s2_used * ext.var_theta_hat_E)
    res.avar = av
    if av.avar_nde is not None:
        res.intervals["nde"] = ci_asymptotic(nde, av.avar_nde, n, level)
    res.intervals["nie"] = ci_asymptotic(nie, av.avar_nie, n, level)
    if av.avar_te is not None:
        res.intervals["te"] = ci_asymptotic(te, av.avar_te, n, level)
    elif method is Method.HARD:
        res.intervals["te"] = IntervalEstimate(te, te, level, IntervalKind.ASYMPTOTIC)

    if method is Method.SOFT and bootstrap_B > 0:
        boot = bootstrap_soft(st, ext, soft, bootstrap_B, seed, fit_s=fit)
        res.intervals["nde"] = boot.interval("nde", level)
        res.intervals["te"] = boot.interval("te", level)

    if wald_pretest:
        res.wald = wald_null_test(fit_u, sigma_a2, n)
        if res.wald.p_value > 0.05:
            res.intervals["nie"] = ci_mixture_nie(nie, fit_u, sigma_a2, n, level,
                                                  mixture_draws, seed)
            msg = (f"Wald test of no mediation did not reject (p={res.wald.p_value:.3g}); "
                   "NIE interval uses the composite-null reference law")
            res.notes.append(msg)
            warnings.warn(msg, stacklevel=2)
    return res

"""Monte Carlo harness for comparing the estimators on simulated data.

A scenario cell fixes the generative mediation model (mediator effects,
block-exchangeable mediator covariance, R^2 targets), the internal sample
size and the external sample-size multiplier.  Each replicate simulates an
internal dataset and an external total-effect estimate, fits all estimators
and records effects and interval estimates.  Replicates draw from their own
seed substream, so results do not depend on how they are scheduled.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import linalg

from . import inference
from .core import ExternalSummary, InternalDataset, MediationFit, Method, SuffStats
from .errors import ConfigError, MedfuseError, NotPositiveDefinite
from .estimators import (
    HardConfig,
    SoftConfig,
    extract_effects,
    fit_hard_constraint,
    fit_soft_constraint,
    fit_unconstrained,
)
from .sampling import factor, mediation_gram, mvn_gram

METHODS = ("unconstrained", "hard", "soft_eb", "hard_oracle")
EFFECTS = ("nde", "nie", "te")

_MODE_RE = re.compile(r"^\s*(congenial|fixed|random)\s*(?:\(([^)]*)\))?\s*$", re.I)


@dataclass(frozen=True)
class ThetaEMode:
    """How the population external total effect relates to the internal one."""

    kind: str = "congenial"
    value: float | None = None
    mean: float | None = None
    variance: float | None = None

    @classmethod
    def parse(cls, text: str | ThetaEMode) -> ThetaEMode:
        if isinstance(text, ThetaEMode):
            return text
        m = _MODE_RE.match(str(text))
        if not m:
            raise ConfigError(f"theta_E_mode: cannot parse {text!r}; use congenial, "
                              "fixed(v) or random(mean,variance)")
        kind = m.group(1).lower()
        args = [float(a) for a in (m.group(2) or "").split(",") if a.strip()]
        if kind == "congenial" and not args:
            return cls("congenial")
        if kind == "fixed" and len(args) == 1:
            return cls("fixed", value=args[0])
        if kind == "random" and len(args) == 2 and args[1] >= 0:
            return cls("random", mean=args[0], variance=args[1])
        raise ConfigError(f"theta_E_mode: bad arguments in {text!r}")

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed({self.value:g})"
        if self.kind == "random":
            return f"random({self.mean:g},{self.variance:g})"
        return "congenial"

    def draw(self, theta_I: float, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind == "random":
            return float(rng.normal(self.mean, math.sqrt(self.variance)))
        return float(theta_I)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell.

    ``beta_m_pattern`` is a run-length list of ``(value, count)`` pairs.
    ``sampler`` selects how internal data are drawn: ``"stats"`` samples the
    Gram matrix exactly, ``"rows"`` simulates individual rows.
    """

    n: int = 200
    n_E_multiplier: int = 1000
    p_m: int = 50
    p_c: int = 5
    rho: float = 0.2
    alpha_active: float = 0.6
    alpha_active_count: int = 10
    alpha_c_fill: float = 0.1
    beta_m_pattern: tuple = ((0.1, 5), (0.0, 5), (0.1, 5), (0.0, 35))
    beta_c_fill: float = 0.1
    r2_ac: float = 0.2
    r2_mac: float = 0.5
    within_block_corr: float = 0.3
    across_block_corr: float = 0.2
    theta_I: float = 1.0
    theta_E_mode: ThetaEMode = field(default_factory=ThetaEMode)
    replicates: int = 2000
    seed: int = 0
    bootstrap_B: int = 0
    level: float = 0.95
    wald_pretest: bool = False
    sampler: str = "stats"
    hard: HardConfig = field(default_factory=HardConfig)
    soft: SoftConfig = field(default_factory=SoftConfig)

    def __post_init__(self):
        object.__setattr__(self, "theta_E_mode", ThetaEMode.parse(self.theta_E_mode))
        object.__setattr__(self, "beta_m_pattern",
                           tuple((float(v), int(c)) for v, c in self.beta_m_pattern))
        for name in ("n", "n_E_multiplier", "p_m", "p_c", "replicates", "alpha_active_count"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.alpha_active_count > self.p_m:
            raise ConfigError("alpha_active_count exceeds p_m")
        if sum(c for _, c in self.beta_m_pattern) != self.p_m:
            raise ConfigError("beta_m_pattern counts must sum to p_m")
        for name in ("r2_ac", "r2_mac"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.bootstrap_B and self.bootstrap_B < 100:
            raise ConfigError("bootstrap_B must be 0 (off) or at least 100")
        if self.sampler not in ("stats", "rows"):
            raise ConfigError("sampler must be 'stats' or 'rows'")

    @property
    def n_E(self) -> int:
        return self.n * self.n_E_multiplier

    @property
    def scenario_id(self) -> str:
        base = (f"n{self.n}_nE{self.n_E_multiplier}x_rac{self.r2_ac:g}_rmac{self.r2_mac:g}"
                f"_{self.theta_E_mode}")
        base = re.sub(r"[^A-Za-z0-9_.-]+", "-", base).strip("-")
        defaults = ScenarioConfig()
        extra = {k: v for k, v in self.to_dict().items()
                 if k not in ("n", "n_E_multiplier", "r2_ac", "r2_mac", "theta_E_mode",
                              "seed", "replicates")
                 and v != defaults.to_dict()[k]}
        if extra:
            digest = hashlib.sha256(json.dumps(extra, sort_keys=True).encode()).hexdigest()[:8]
            base += f"_{digest}"
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_E_mode"] = str(self.theta_E_mode)
        d["beta_m_pattern"] = [list(p) for p in self.beta_m_pattern]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        d = dict(d)
        if "hard" in d and isinstance(d["hard"], dict):
            d["hard"] = HardConfig(**d["hard"])
        if "soft" in d and isinstance(d["soft"], dict):
            d["soft"] = SoftConfig(**d["soft"])
        if "beta_m_pattern" in d:
            d["beta_m_pattern"] = tuple(tuple(p) for p in d["beta_m_pattern"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ScenarioTruth:
    """Full generative parameter set for a scenario.

    ``alpha_c`` is ``p_m x (p_c + 1)`` and ``beta_c`` has length ``p_c + 1``;
    the first confounder column is the intercept.  ``Omega`` is the joint
    covariance of ``(A, C_1, ..., C_pc)``.
    """

    alpha_a: np.ndarray
    alpha_c: np.ndarray
    Sigma_m: np.ndarray
    beta_a: float
    beta_m: np.ndarray
    beta_c: np.ndarray
    sigma_e2: float
    theta_I: float
    Omega: np.ndarray
    sigma_a2: float

    @property
    def nie(self) -> float:
        return float(self.alpha_a @ self.beta_m)

    @property
    def nde(self) -> float:
        return self.beta_a

    @property
    def te(self) -> float:
        return self.beta_a + self.nie

    @property
    def p_m(self) -> int:
        return self.alpha_a.size

    @property
    def p_c(self) -> int:
        return self.beta_c.size - 1

    @property
    def theta_c(self) -> np.ndarray:
        return self.beta_c + self.alpha_c.T @ self.beta_m

    @property
    def sigma_t2(self) -> float:
        return self.sigma_e2 + float(self.beta_m @ self.Sigma_m @ self.beta_m)

    def as_fit(self, method: Method = Method.UNCONSTRAINED) -> MediationFit:
        """The true parameters packaged for the asymptotic-variance formulas."""
        return MediationFit(self.alpha_a, self.alpha_c, self.Sigma_m, self.beta_a,
                            self.beta_m, self.beta_c, self.sigma_e2, self.te, method,
                            loglik=float("nan"))


def exchangeable(dim: int, rho: float) -> np.ndarray:
    return (1 - rho) * np.eye(dim) + rho * np.ones((dim, dim))


def build_truth(cfg: ScenarioConfig) -> ScenarioTruth:
    p_m, p_c = cfg.p_m, cfg.p_c
    alpha_a = np.zeros(p_m)
    alpha_a[: cfg.alpha_active_count] = cfg.alpha_active
    alpha_c = np.full((p_m, p_c + 1), cfg.alpha_c_fill)
    beta_m = np.concatenate([np.full(c, v) for v, c in cfg.beta_m_pattern])
    beta_c = np.full(p_c + 1, cfg.beta_c_fill)

    k = cfg.alpha_active_count
    R = np.full((p_m, p_m), cfg.across_block_corr)
    R[:k, :k] = cfg.within_block_corr
    R[k:, k:] = cfg.within_block_corr
    np.fill_diagonal(R, 1.0)
    a1 = cfg.alpha_active
    diag = a1 * a1 * (1 - cfg.r2_ac) / cfg.r2_ac
    Sigma_m = diag * R
    Omega = exchangeable(p_c + 1, cfg.rho)
    for name, mat in (("Sigma_m", Sigma_m), ("Omega", Omega)):
        if np.linalg.eigvalsh(mat)[0] <= 0:
            raise NotPositiveDefinite(f"{name} is not positive definite")

    signal = float(beta_m @ Sigma_m @ beta_m)
    sigma_e2 = signal * (1 - cfg.r2_mac) / cfg.r2_mac
    if signal == 0:
        raise ConfigError("beta_m'Sigma_m beta_m is zero; r2_mac cannot be matched")
    beta_a = cfg.theta_I - float(alpha_a @ beta_m)
    occ = Omega[1:, 1:]
    sigma_a2 = float(Omega[0, 0] - Omega[0, 1:] @ np.linalg.solve(occ, Omega[1:, 0]))
    return ScenarioTruth(alpha_a, alpha_c, Sigma_m, beta_a, beta_m, beta_c, sigma_e2,
                         cfg.theta_I, Omega, sigma_a2)


def _draw_ac(truth: ScenarioTruth, n: int, rng: np.random.Generator):
    """Rows of (A, C) with the intercept prepended to C."""
    Z = rng.standard_normal((n, truth.p_c + 1)) @ factor(truth.Omega).T
    return Z[:, 0], np.column_stack([np.ones(n), Z[:, 1:]])


def simulate_internal(truth: ScenarioTruth, n: int, rng: np.random.Generator) -> InternalDataset:
    """Draw ``n`` rows from the mediator and outcome models."""
    A, C = _draw_ac(truth, n, rng)
    E = rng.standard_normal((n, truth.p_m)) @ factor(truth.Sigma_m).T
    M = np.outer(A, truth.alpha_a) + C @ truth.alpha_c.T + E
    e = rng.standard_normal(n) * math.sqrt(truth.sigma_e2)
    Y = M @ truth.beta_m + truth.beta_a * A + C @ truth.beta_c + e
    return InternalDataset(Y=Y, M=M, A=A, C=C)


def _xx_from_ac_gram(G: np.ndarray) -> np.ndarray:
    """Reorder a Gram of ``[1 | A | C]`` into ``[A | 1 | C]``."""
    idx = [1, 0] + list(range(2, G.shape[0]))
    return G[np.ix_(idx, idx)]


def simulate_internal_stats(truth: ScenarioTruth, n: int, rng: np.random.Generator) -> SuffStats:
    """Draw the sufficient statistics of an ``n``-row internal dataset exactly."""
    XX = _xx_from_ac_gram(mvn_gram(n, truth.Omega, rng))
    alpha = np.vstack([truth.alpha_a, truth.alpha_c.T])
    beta_x = np.concatenate([[truth.beta_a], truth.beta_c])
    G = mediation_gram(XX, alpha, beta_x, truth.beta_m, truth.Sigma_m, truth.sigma_e2, n, rng)
    return SuffStats(n, truth.p_c + 1, truth.p_m, G)


def simulate_external_summary(truth: ScenarioTruth, theta_E: float, n_E: int,
                              rng: np.random.Generator, sampler: str = "stats") -> ExternalSummary:
    """OLS total-effect estimate and its variance from a simulated external study.

    The external outcome follows the total-effect model with slope
    ``theta_E``, confounder coefficients ``beta_c + alpha_c'beta_m`` and
    residual variance ``sigma_e2 + beta_m'Sigma_m beta_m``.  With
    ``sampler="stats"`` the design Gram matrix, coefficient vector and
    residual sum of squares are drawn from their exact joint law.
    """
    if n_E < 10:
        raise ConfigError("n_E must be at least 10")
    coef = np.concatenate([[theta_E], truth.theta_c])
    k = coef.size
    if sampler == "rows":
        A, C = _draw_ac(truth, n_E, rng)
        X = np.column_stack([A, C])
        Y = X @ coef + rng.standard_normal(n_E) * math.sqrt(truth.sigma_t2)
        est, *_ = np.linalg.lstsq(X, Y, rcond=None)
        rss = float(np.sum((Y - X @ est) ** 2))
        XX = X.T @ X
    else:
        XX = _xx_from_ac_gram(mvn_gram(n_E, truth.Omega, rng))
        R = linalg.cholesky(XX, lower=False)
        est = coef + math.sqrt(truth.sigma_t2) * linalg.solve_triangular(
            R, rng.standard_normal(k))
        rss = truth.sigma_t2 * rng.chisquare(n_E - k)
    XX_inv_aa = float(np.linalg.inv(XX)[0, 0])
    return ExternalSummary(float(est[0]), rss / n_E * XX_inv_aa, n_E)


@dataclass
class ReplicateResult:
    replicate: int
    method: str
    nde: float = float("nan")
    nie: float = float("nan")
    te: float = float("nan")
    nde_lo: float = float("nan")
    nde_hi: float = float("nan")
    nie_lo: float = float("nan")
    nie_hi: float = float("nan")
    te_lo: float = float("nan")
    te_hi: float = float("nan")
    theta_E_hat: float = float("nan")
    s2_used: float = float("nan")
    converged: bool = True
    error: str = ""
    seconds: float = 0.0

    CSV_FIELDS = ("replicate", "method", "nde", "nie", "te", "nde_lo", "nde_hi", "nie_lo",
                  "nie_hi", "te_lo", "te_hi", "theta_E_hat", "s2_used", "converged", "error")


@dataclass
class EffectSummary:
    method: str
    effect: str
    truth: float
    mean_est: float
    rmse: float
    rel_rmse_vs_unconstrained: float
    coverage: float
    mean_ci_length: float
    n_replicates: int
    n_failed: int


@dataclass
class ScenarioSummary:
    scenario_id: str
    config: ScenarioConfig
    rows: list[EffectSummary]
    failure_rate: float

    @property
    def flagged(self) -> bool:
        return self.failure_rate > 0.01

    def get(self, method: str, effect: str) -> EffectSummary:
        for r in self.rows:
            if r.method == method and r.effect == effect:
                return r
        raise KeyError((method, effect))


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _record(rep, method, fit_obj, eff, ext, seconds, s2=None) -> ReplicateResult:
    nde, nie, te = extract_effects(fit_obj)
    r = ReplicateResult(rep, method, nde, nie, te, theta_E_hat=ext.theta_hat_E, seconds=seconds)
    for name in EFFECTS:
        iv = eff.intervals.get(name)
        if iv is not None:
            setattr(r, f"{name}_lo", float(iv.lower))
            setattr(r, f"{name}_hi", float(iv.upper))
    if s2 is not None:
        r.s2_used = s2
    return r


def run_replicate(cfg: ScenarioConfig, truth: ScenarioTruth, index: int) -> list[ReplicateResult]:
    rng = replicate_rng(cfg.seed, index)
    if cfg.sampler == "rows":
        data = simulate_internal(truth, cfg.n, rng)
    else:
        data = simulate_internal_stats(truth, cfg.n, rng)
    theta_E = cfg.theta_E_mode.draw(truth.theta_I, rng)
    ext = simulate_external_summary(truth, theta_E, cfg.n_E, rng)
    boot_seed = int(rng.integers(2**63))
    oracle = ExternalSummary(truth.theta_I, ext.var_theta_hat_E, ext.n_E)

    out = []
    t0 = time.perf_counter()
    try:
        fu = fit_unconstrained(data)
    except MedfuseError as exc:
        return [ReplicateResult(index, m, converged=False, error=type(exc).__name__)
                for m in METHODS]
    jobs = (
        ("unconstrained", None, lambda: fu),
        ("hard", ext, lambda: fit_hard_constraint(data, ext, cfg.hard, init=fu)),
        ("soft_eb", ext, lambda: fit_soft_constraint(data, ext, cfg.soft, init=fu)),
        ("hard_oracle", oracle, lambda: fit_hard_constraint(data, oracle, cfg.hard, init=fu)),
    )
    for name, e, make in jobs:
        t = time.perf_counter() if out else t0
        try:
            f = make()
            eff = inference.infer_effects(
                f, data, e, level=cfg.level, soft=cfg.soft,
                bootstrap_B=cfg.bootstrap_B if name == "soft_eb" else 0,
                seed=boot_seed, wald_pretest=cfg.wald_pretest, fit_u=fu)
        except MedfuseError as exc:
            out.append(ReplicateResult(index, name, converged=False, error=type(exc).__name__,
                                       theta_E_hat=ext.theta_hat_E))
            continue
        out.append(_record(index, name, f, eff, ext if e is None else e,
                           time.perf_counter() - t, f.s2_used))
    out[0].theta_E_hat = ext.theta_hat_E
    return out


def _run_chunk(args):
    cfg, truth, indices = args
    return [r for i in indices for r in run_replicate(cfg, truth, i)]


def run_replicates(cfg: ScenarioConfig, workers: int = 1) -> list[ReplicateResult]:
    truth = build_truth(cfg)
    idx = list(range(cfg.replicates))
    if workers <= 1:
        results = _run_chunk((cfg, truth, idx))
    else:
        chunks = [idx[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_run_chunk, [(cfg, truth, c) for c in chunks])
                       for r in part]
    order = {m: i for i, m in enumerate(METHODS)}
    results.sort(key=lambda r: (r.replicate, order[r.method]))
    return results


def summarize(cfg: ScenarioConfig, results: list[ReplicateResult],
              truth: ScenarioTruth | None = None) -> ScenarioSummary:
    """Aggregate RMSE, relative RMSE (method over unconstrained) and coverage."""
    truth = truth or build_truth(cfg)
    targets = {"nde": truth.nde, "nie": truth.nie, "te": truth.te}
    by_method = {m: [r for r in results if r.method == m] for m in METHODS}
    failed_reps = {r.replicate for r in results if not r.converged}
    rmse = {}
    rows = []
    for m in METHODS:
        ok = [r for r in by_method[m] if r.converged]
        for eff in EFFECTS:
            est = np.array([getattr(r, eff) for r in ok])
            lo = np.array([getattr(r, f"{eff}_lo") for r in ok])
            hi = np.array([getattr(r, f"{eff}_hi") for r in ok])
            t = targets[eff]
            err = est - t
            rm = float(np.sqrt(np.mean(err**2))) if est.size else float("nan")
            rmse[m, eff] = rm
            has_ci = est.size and np.all(np.isfinite(lo) & np.isfinite(hi))
            cover = float(np.mean((lo <= t) & (t <= hi))) if has_ci else float("nan")
            length = float(np.mean(hi - lo)) if has_ci else float("nan")
            rows.append(EffectSummary(m, eff, t, float(np.mean(est)) if est.size else float("nan"),
                                      rm, float("nan"), cover, length, len(ok),
                                      len(by_method[m]) - len(ok)))
    for row in rows:
        base = rmse["unconstrained", row.effect]
        row.rel_rmse_vs_unconstrained = row.rmse / base if base > 0 else float("nan")
    n_rep = len({r.replicate for r in results}) or 1
    return ScenarioSummary(cfg.scenario_id, cfg, rows, len(failed_reps) / n_rep)


def run_scenario(cfg: ScenarioConfig, workers: int = 1) -> ScenarioSummary:
    results = run_replicates(cfg, workers)
    summary = summarize(cfg, results)
    summary.results = results
    return summary


def expand_grid(base: dict, grid: dict) -> list[ScenarioConfig]:
    """Cartesian product of ``grid`` value lists layered over ``base``."""
    keys = sorted(grid)
    cells = [{}]
    for k in keys:
        vals = grid[k] if isinstance(grid[k], (list, tuple)) else [grid[k]]
        cells = [dict(c, **{k: v}) for c in cells for v in vals]
    return [ScenarioConfig.from_dict({**base, **c}) for c in cells]


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(cfg, **kw)

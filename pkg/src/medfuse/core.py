"""Data model, validation, residualization and sufficient statistics.

Every estimator in the package depends on the data only through the Gram
matrix of the stacked columns ``[A | C | M | Y]``.  :class:`SuffStats` holds
that matrix; it can be built from an :class:`InternalDataset` or drawn
directly by the simulator.

Variance outputs follow the maximum-likelihood convention: residual sums of
squares are divided by ``n``, never by ``n - p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import (
    DimensionMismatch,
    MissingIntercept,
    RankDeficient,
    TooFewRows,
    ValidationError,
    ZeroExposureVariance,
)

RANK_RTOL = 1e-10


class Method(str, Enum):
    UNCONSTRAINED = "unconstrained"
    HARD = "hard"
    SOFT = "soft"


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class InternalDataset:
    """Individual-level internal data.

    ``C`` must already contain the intercept column.
    """

    Y: np.ndarray
    M: np.ndarray
    A: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        A = np.asarray(self.A, dtype=float)
        M = np.asarray(self.M, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if Y.ndim != 1 or A.ndim != 1:
            raise DimensionMismatch("Y and A must be vectors")
        if M.ndim == 1:
            M = M[:, None]
        if C.ndim == 1:
            C = C[:, None]
        if M.ndim != 2 or C.ndim != 2:
            raise DimensionMismatch("M and C must be matrices")
        n = Y.shape[0]
        if A.shape[0] != n or M.shape[0] != n or C.shape[0] != n:
            raise DimensionMismatch(
                f"row counts differ: Y={n}, A={A.shape[0]}, M={M.shape[0]}, C={C.shape[0]}"
            )
        for name, val in (("Y", Y), ("M", M), ("A", A), ("C", C)):
            object.__setattr__(self, name, _readonly(val))

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p_m(self) -> int:
        return self.M.shape[1]

    @property
    def p_c(self) -> int:
        return self.C.shape[1]


@dataclass(frozen=True)
class ExternalSummary:
    """Summary-level external estimate of the total effect."""

    theta_hat_E: float
    var_theta_hat_E: float
    n_E: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.theta_hat_E):
            raise ValidationError("theta_hat_E must be finite")
        if not (self.var_theta_hat_E > 0 and np.isfinite(self.var_theta_hat_E)):
            raise ValidationError("var_theta_hat_E must be positive")
        if self.n_E is not None and int(self.n_E) <= 0:
            raise ValidationError("n_E must be a positive integer")


@dataclass(frozen=True)
class MediationFit:
    """Fitted mediator and outcome model parameters.

    ``alpha_c`` is ``p_m x p_c``; ``Sigma_m`` and ``sigma_e2`` are MLEs
    (divide-by-n).  For hard and soft fits ``beta_a`` is the derived
    quantity ``te - alpha_a @ beta_m``.
    """

    alpha_a: np.ndarray
    alpha_c: np.ndarray
    Sigma_m: np.ndarray
    beta_a: float
    beta_m: np.ndarray
    beta_c: np.ndarray
    sigma_e2: float
    te: float
    method: Method
    loglik: float
    s2_used: float | None = None
    n_iter: int = 0

    @property
    def nie(self) -> float:
        return float(self.alpha_a @ self.beta_m)

    @property
    def nde(self) -> float:
        return self.te - self.nie


@dataclass(frozen=True)
class TEModelFit:
    """OLS fit of the internal total-effect model ``Y ~ A + C``.

    ``sigma_t2`` is RSS/n and ``var_theta_a`` uses that same residual variance.
    """

    theta_a: float
    theta_c: np.ndarray
    sigma_t2: float
    var_theta_a: float


@dataclass(frozen=True)
class ResidualizedData:
    Y_r: np.ndarray
    M_r: np.ndarray
    A_r: np.ndarray
    sigma_a2_hat: float  # A_r'A_r / n


@dataclass(frozen=True)
class SuffStats:
    """Gram matrix of ``[A | C | M | Y]`` together with its dimensions."""

    n: int
    p_c: int
    p_m: int
    gram: np.ndarray = field(repr=False)

    def __post_init__(self):
        k = 1 + self.p_c + self.p_m + 1
        G = np.asarray(self.gram, dtype=float)
        if G.shape != (k, k):
            raise DimensionMismatch(f"gram must be {k}x{k}, got {G.shape}")
        object.__setattr__(self, "gram", _readonly(0.5 * (G + G.T)))

    @classmethod
    def from_data(cls, data: InternalDataset) -> SuffStats:
        Z = np.column_stack([data.A, data.C, data.M, data.Y])
        return cls(data.n, data.p_c, data.p_m, Z.T @ Z)

    # column blocks
    @property
    def sl_c(self) -> slice:
        return slice(1, 1 + self.p_c)

    @property
    def sl_m(self) -> slice:
        return slice(1 + self.p_c, 1 + self.p_c + self.p_m)

    @cached_property
    def AA(self) -> float:
        return float(self.gram[0, 0])

    @cached_property
    def AC(self) -> np.ndarray:
        return self.gram[0, self.sl_c]

    @cached_property
    def AM(self) -> np.ndarray:
        return self.gram[0, self.sl_m]

    @cached_property
    def AY(self) -> float:
        return float(self.gram[0, -1])

    @cached_property
    def CC(self) -> np.ndarray:
        return self.gram[self.sl_c, self.sl_c]

    @cached_property
    def CM(self) -> np.ndarray:
        return self.gram[self.sl_c, self.sl_m]

    @cached_property
    def CY(self) -> np.ndarray:
        return self.gram[self.sl_c, -1]

    @cached_property
    def MM(self) -> np.ndarray:
        return self.gram[self.sl_m, self.sl_m]

    @cached_property
    def MY(self) -> np.ndarray:
        return self.gram[self.sl_m, -1]

    @cached_property
    def YY(self) -> float:
        return float(self.gram[-1, -1])

    @cached_property
    def CC_factor(self):
        try:
            return linalg.cho_factor(self.CC)
        except linalg.LinAlgError as exc:
            raise RankDeficient("C'C is singular") from exc

    @cached_property
    def XX(self) -> np.ndarray:
        """Gram block of ``X = [A | C]``."""
        k = 1 + self.p_c
        return self.gram[:k, :k]

    @cached_property
    def XM(self) -> np.ndarray:
        k = 1 + self.p_c
        return self.gram[:k, self.sl_m]

    @cached_property
    def A_r_sq(self) -> float:
        """Squared norm of A after projecting out C."""
        b = linalg.cho_solve(self.CC_factor, self.AC)
        return float(self.AA - self.AC @ b)

    @property
    def sigma_a2(self) -> float:
        return self.A_r_sq / self.n

    def quad(self, w: np.ndarray) -> float:
        """``||[A C M Y] w||^2``."""
        return float(w @ self.gram @ w)


def suff_stats(data: InternalDataset | SuffStats) -> SuffStats:
    if isinstance(data, SuffStats):
        return data
    return SuffStats.from_data(data)


def _min_rel_singular(X: np.ndarray) -> float:
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0.0
    return float(s[-1] / s[0])


def validate(data: InternalDataset) -> None:
    """Raise a :class:`ValidationError` subclass unless ``data`` is fittable.

    Requires one constant (intercept) column in ``C``, no all-zero columns,
    ``n >= p_m + p_c + 1`` and a full-column-rank design ``[A | C | M]``.
    """
    n, p_m, p_c = data.n, data.p_m, data.p_c
    if n < p_m + p_c + 1:
        raise TooFewRows(f"n={n} rows cannot identify {p_m + p_c + 1} outcome coefficients")
    for name, X in (("A", data.A[:, None]), ("C", data.C), ("M", data.M)):
        if not np.all(np.isfinite(X)):
            raise ValidationError(f"{name} contains non-finite values")
        zero = np.flatnonzero(np.all(X == 0, axis=0))
        if zero.size:
            raise RankDeficient(f"{name} column {int(zero[0])} is identically zero")
    if not np.all(np.isfinite(data.Y)):
        raise ValidationError("Y contains non-finite values")
    const = np.flatnonzero(np.all(data.C == data.C[0], axis=0))
    if const.size == 0:
        raise MissingIntercept("C has no constant (intercept) column")
    if const.size > 1:
        raise RankDeficient(f"C has {const.size} constant columns")
    Z = np.column_stack([data.A, data.C, data.M])
    if _min_rel_singular(Z) <= RANK_RTOL:
        raise RankDeficient("design [A | C | M] is not of full column rank")


def check_stats(st: SuffStats) -> None:
    """Rank check on a Gram matrix (eigenvalues are squared singular values)."""
    k = 1 + st.p_c + st.p_m
    G = st.gram[:k, :k]
    d = np.sqrt(np.diag(G))
    if np.any(d == 0):
        raise RankDeficient("design has an all-zero column")
    ev = np.linalg.eigvalsh(G / np.outer(d, d))
    if ev[0] <= RANK_RTOL**2 * ev[-1]:
        raise RankDeficient("design [A | C | M] is not of full column rank")


def check_exposure(st: SuffStats) -> None:
    if st.A_r_sq <= 1e-12 * st.AA:
        raise ZeroExposureVariance("exposure has no variation after adjusting for C")


def residualize(data: InternalDataset) -> ResidualizedData:
    """Least-squares residuals of Y, each column of M, and A on C."""
    if _min_rel_singular(data.C) <= RANK_RTOL:
        raise RankDeficient("C'C is singular")
    Q, _ = np.linalg.qr(data.C)

    def resid(X):
        return X - Q @ (Q.T @ X)

    A_r = resid(data.A)
    return ResidualizedData(
        Y_r=_readonly(resid(data.Y)),
        M_r=_readonly(resid(data.M)),
        A_r=_readonly(A_r),
        sigma_a2_hat=float(A_r @ A_r) / data.n,
    )


def fit_te_model(data: InternalDataset | SuffStats) -> TEModelFit:
    """OLS of Y on (A, C) with the 1/n residual-variance convention."""
    st = suff_stats(data)
    k = 1 + st.p_c
    XX = st.XX
    XY = st.gram[:k, -1]
    try:
        fac = linalg.cho_factor(XX)
    except linalg.LinAlgError as exc:
        raise RankDeficient("[A | C] is not of full column rank") from exc
    coef = linalg.cho_solve(fac, XY)
    rss = max(st.YY - coef @ XY, 0.0)
    sigma_t2 = rss / st.n
    # (X'X)^{-1}_{AA} = 1 / (A_r'A_r)
    var_theta_a = sigma_t2 / st.A_r_sq
    return TEModelFit(
        theta_a=float(coef[0]),
        theta_c=_readonly(coef[1:]),
        sigma_t2=float(sigma_t2),
        var_theta_a=float(var_theta_a),
    )


def with_intercept(C: np.ndarray | None, n: int) -> np.ndarray:
    """Prepend a column of ones unless ``C`` already has a nonzero constant column."""
    if C is None or np.size(C) == 0:
        return np.ones((n, 1))
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    const = np.all(C == C[0], axis=0) & (C[0] != 0)
    if const.any():
        return C
    return np.column_stack([np.ones(n), C])

"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MedfuseError(Exception):
    """Base class for all package errors."""


class ValidationError(MedfuseError):
    """Input data violates a structural requirement of the model."""


class DimensionMismatch(ValidationError):
    pass


class TooFewRows(ValidationError):
    pass


class MissingIntercept(ValidationError):
    pass


class RankDeficient(ValidationError):
    pass


class ZeroExposureVariance(ValidationError):
    """The exposure is an exact linear function of the confounders."""


class SingularSigmaM(MedfuseError):
    """The mediator error covariance cannot be inverted."""


class NotPositiveDefinite(MedfuseError):
    """A generative covariance specification is not positive definite."""


class NoConvergence(MedfuseError):
    """An iterative fit hit its iteration cap before meeting its tolerance."""

    def __init__(self, iterations: int, last_delta: float, what: str = "fit",
                 replicate: int | None = None):
        self.iterations = iterations
        self.last_delta = last_delta
        self.what = what
        self.replicate = replicate
        msg = f"{what} did not converge after {iterations} iterations (last change {last_delta:.3g})"
        if replicate is not None:
            msg += f" in bootstrap replicate {replicate}"
        super().__init__(msg)


class ParseError(MedfuseError):
    pass


class ConfigError(MedfuseError):
    pass


class SchemaMismatch(MedfuseError):
    pass

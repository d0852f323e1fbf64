"""Mediation analysis integrating an external total-effect estimate."""

from .core import ExternalSummary, InternalDataset, MediationFit, Method, SuffStats
from .errors import MedfuseError, NoConvergence, ValidationError

__version__ = "0.1.0"

__all__ = [
    "ExternalSummary",
    "InternalDataset",
    "MediationFit",
    "Method",
    "SuffStats",
    "MedfuseError",
    "NoConvergence",
    "ValidationError",
]

"""Exception hierarchy shared by every sslab module."""

from __future__ import annotations


class SslabError(Exception):
    """Base class for all library errors."""


class DomainError(SslabError, ValueError):
    """An input lies outside the declared support of a model object."""


class ArgumentError(SslabError, ValueError):
    """An argument is malformed (bad index, empty size, invalid level)."""


class StateError(SslabError, RuntimeError):
    """An operation was requested on an object in the wrong state."""


class EstimationError(SslabError, RuntimeError):
    """Not enough data to carry out an estimation step."""


class DegeneracyError(SslabError, ArithmeticError):
    """A density needed as a denominator fell below the configured floor."""


class SparseRegionError(EstimationError):
    """Too few effective observations near an evaluation point."""


class ExtrapolationError(SslabError, ValueError):
    """A requested level lies outside the range of an estimated curve."""


class BracketError(SslabError, RuntimeError):
    """A root-finding bracket does not contain a sign change."""


class ProviderInconsistencyError(SslabError, RuntimeError):
    """Quantile and CDF evaluations of a provider fail to invert each other."""


class UnsupportedChannelError(SslabError, NotImplementedError):
    """The provider cannot evaluate the requested derivative channel."""


class EmptyGridError(SslabError, RuntimeError):
    """Every candidate grid point was rejected."""


class UnreliableBootstrapError(SslabError, RuntimeError):
    """Too many bootstrap replicates failed."""


class ConfigError(SslabError, ValueError):
    """A run configuration could not be parsed or validated."""


class ReportParseError(SslabError, ValueError):
    """A persisted report is malformed."""

"""Exception hierarchy shared by every sugdg module."""


class SugdgError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(SugdgError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConfigError(SugdgError, ValueError):
    """A configuration or specification value is invalid."""


class LoadError(SugdgError):
    """A file could not be parsed or refers to invalid data."""


class SplitError(SugdgError):
    """A dataset cannot be split as requested."""


class NumericError(SugdgError, ArithmeticError):
    """A non-finite value appeared during a computation."""


class ContractError(SugdgError):
    """Arguments that must belong together do not match."""


class EvaluationError(SugdgError):
    """Evaluation inputs are inconsistent with the checkpoint."""

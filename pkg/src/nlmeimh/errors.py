"""Exception hierarchy."""


class NlmeError(Exception):
    """Base class for all package errors."""


class ConfigError(NlmeError, ValueError):
    """Inconsistent model or run configuration."""


class DomainError(NlmeError, ValueError):
    """Input outside the domain of a transformation or model."""


class EvaluationError(NlmeError, ArithmeticError):
    """A structural, hazard or likelihood evaluation failed.

    ``index`` points at the offending observation when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ProposalError(NlmeError):
    """The MAP/Laplace proposal could not be built."""


class InvalidStateError(NlmeError):
    """A Markov chain sits at a point of zero target density."""

"""Exception hierarchy shared across the package."""


class ElastInvError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ElastInvError, ValueError):
    """Shapes or sizes do not agree."""


class DomainError(ElastInvError, ValueError):
    """A value lies outside the domain an operation is defined on."""


class SingularSystemError(ElastInvError, ArithmeticError):
    """A matrix that must be SPD failed to factorize."""


class FormatError(ElastInvError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class PlacementError(ElastInvError, RuntimeError):
    """Phantom lesions could not be placed inside the domain."""


class NumericalAbort(ElastInvError, RuntimeError):
    """An iterative procedure produced non-finite values or diverged."""

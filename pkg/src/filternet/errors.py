"""Exception hierarchy shared by all subpackages."""


class FilterNetError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(FilterNetError, ValueError):
    """Shapes, kernel sizes, file contents or config keys are inconsistent."""


class NumericError(FilterNetError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class DomainError(FilterNetError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class DegenerateInputError(FilterNetError, ValueError):
    """Input data carries no information (e.g. a constant volume)."""


class LocalizationError(FilterNetError):
    """The two legs could not be separated in a volume."""


class FileFormatError(FilterNetError, OSError):
    """A file on disk is truncated or is not in the expected binary format."""

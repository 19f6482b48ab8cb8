"""Exception hierarchy shared across the toolkit."""


class WeedVisionError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(WeedVisionError):
    """Operands have incompatible shapes."""


class ConfigError(WeedVisionError):
    """A configuration value violates its contract."""


class FormatError(WeedVisionError):
    """A file decodes but does not meet the expected format."""


class ParseError(WeedVisionError):
    """A text record cannot be parsed; carries the offending line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class ValidationError(WeedVisionError):
    """A parsed value is out of its allowed range."""


class GenerationError(WeedVisionError):
    """Synthetic scene generation could not satisfy its constraints."""


class StateError(WeedVisionError):
    """An operation was invoked in an invalid state (e.g. missing gradients)."""


class CheckError(WeedVisionError):
    """A verification routine could not run to completion."""


class DegenerateDataError(WeedVisionError):
    """Input data is degenerate for the requested computation."""


class EmptyInputError(WeedVisionError):
    """An operation that requires data received none."""

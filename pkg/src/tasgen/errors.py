"""Exception hierarchy shared by every stage."""


class TasgenError(Exception):
    """Base class for all package errors."""


class ValidationError(TasgenError, ValueError):
    """Input violates a documented precondition or invariant."""


class SchemaError(ValidationError):
    """A sample collection is structurally inconsistent."""


class ParseError(ValidationError):
    """A file could not be parsed; message names the file and line."""


class ConfigError(ValidationError):
    """A scenario or pipeline configuration is invalid."""


class TrainingError(TasgenError, RuntimeError):
    """Optimization produced non-finite values or diverged."""


class NumericalError(TasgenError, FloatingPointError):
    """A model computation produced a non-finite value."""

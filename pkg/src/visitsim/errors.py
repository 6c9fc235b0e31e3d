"""Exception types shared across the package."""


class VisitsimError(Exception):
    """Base class for all package errors."""


class ValidationError(VisitsimError):
    """Raised when input data violates a structural invariant."""


class ConfigError(VisitsimError):
    """Raised for malformed or inconsistent configuration."""


class EstimationError(VisitsimError):
    """Raised when a fit cannot be carried out (singular design, no events, ...)."""

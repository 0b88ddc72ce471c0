"""Exception types shared across the package."""


class ShcError(Exception):
    """Base class for package errors."""


class DomainError(ShcError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(ShcError, ValueError):
    """Array shapes are inconsistent."""


class ConfigError(ShcError):
    """Invalid or incomplete configuration."""

"""Exception types shared across the package."""


class CVQKDError(Exception):
    """Base class for all package errors."""


class DomainError(CVQKDError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(DomainError):
    """A configuration value is invalid or inconsistent."""


class PrecisionError(CVQKDError, ValueError):
    """Not enough data to reach a meaningful estimate."""


class SyncError(CVQKDError, RuntimeError):
    """Frame synchronisation did not find an unambiguous correlation peak."""


class EstimationError(CVQKDError, RuntimeError):
    """Parameter estimation failed on the supplied data."""

"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments that violate its contract."""


class ConfigError(ValueError):
    """Raised for malformed or stage-inconsistent run configuration."""


class DataError(RuntimeError):
    """Raised when a manifest or data file is missing or inconsistent."""

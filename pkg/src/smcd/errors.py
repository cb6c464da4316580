"""Error classes shared across the package.

Each class maps to a CLI exit code: ValidationError -> 2,
ConfigError / ShapeError -> 3, I/O failures -> 4.
"""


class SMCDError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    error_class = "error"


class ValidationError(SMCDError):
    """A file or request violates its schema; message names the offending path."""

    exit_code = 2
    error_class = "validation"


class ConfigError(SMCDError):
    """Invalid configuration value or inconsistent model/checkpoint setup."""

    exit_code = 3
    error_class = "config"


class ShapeError(ConfigError):
    """Tensor shape contract violation."""

    exit_code = 3
    error_class = "shape"

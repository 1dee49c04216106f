"""Exception types shared across the package."""


class LfmnetError(Exception):
    """Base class for all package errors."""


class ConfigError(LfmnetError):
    """Invalid configuration value, unknown key, or violated config invariant."""


class DataError(LfmnetError):
    """Missing, unwritable, or otherwise unusable data files."""


class FormatError(DataError):
    """Malformed binary file; the message names the byte offset."""


class StructuralError(LfmnetError):
    """Shape mismatch, missing gradient, or missing parameter."""


class NumericError(LfmnetError):
    """Non-finite value where finite arithmetic is required."""


class InputError(LfmnetError):
    """Out-of-range runtime input, e.g. a label outside the class set."""

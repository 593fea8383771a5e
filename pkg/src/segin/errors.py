"""Exception types raised across the package."""


class SeginError(Exception):
    """Base class for all package errors."""


class DimensionError(SeginError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class InputError(SeginError, ValueError):
    """Input values are invalid (NaN, out of range, malformed)."""


class ConsistencyError(SeginError, RuntimeError):
    """Internal data structures disagree with each other."""


class ManifestError(SeginError, FileNotFoundError):
    """A dataset manifest references a missing or unreadable file."""


class ImageFormatError(SeginError, ValueError):
    """An image file could not be decoded."""


class ConfigError(SeginError, ValueError):
    """A configuration is unusable for the requested protocol."""

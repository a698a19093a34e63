"""Exception types shared across the package; the CLI maps them to exit codes."""

from .netcore import NumericError, StructureError


class ConfigError(ValueError):
    """Invalid configuration or architecture/shape mismatch."""


class DataError(ValueError):
    """Malformed dataset content (annotations, boxes, class ids)."""


__all__ = ["ConfigError", "DataError", "NumericError", "StructureError"]

"""Exception hierarchy shared across the package.

Each class maps to one machine-parsable CLI error category.
"""


class EvBridgeError(Exception):
    category = "error"


class ConfigError(EvBridgeError):
    category = "config-error"


class FormatError(EvBridgeError):
    """Malformed on-disk data (event files, checkpoints, manifests)."""

    category = "format-error"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RangeError(EvBridgeError):
    category = "range-error"


class EmptyInputError(EvBridgeError):
    category = "empty-input-error"


class StructuralError(EvBridgeError):
    """Shape or schema mismatch between components."""

    category = "structural-error"


class NumericError(EvBridgeError):
    """NaN/Inf encountered in a value or gradient."""

    category = "numeric-error"


class PathError(EvBridgeError):
    category = "path-error"

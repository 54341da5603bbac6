"""Exception hierarchy with CLI-facing error categories.

Every toolkit error carries a ``category`` used for exit-message tagging:
validation, storage, configuration, or divergence.
"""


class ToolkitError(Exception):
    category = "error"


class ValidationError(ToolkitError):
    """Invalid input data or arguments."""

    category = "validation"


class NumericError(ValidationError):
    """Non-finite values or numerically undefined results."""


class StorageError(ToolkitError):
    """Filesystem-level read/write failure."""

    category = "storage"


class FormatError(StorageError):
    """File exists but is not in the expected format."""


class CorruptionError(StorageError):
    """File is in the expected format but internally inconsistent."""


class ConfigurationError(ToolkitError):
    """Inconsistent or incompatible run configuration."""

    category = "configuration"


class DivergenceError(ToolkitError):
    """Training produced a non-finite loss."""

    category = "divergence"

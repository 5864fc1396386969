"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 2, NumericError -> 3, I/O errors -> 4.
"""


class BamforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(BamforgeError):
    """Invalid configuration, recipe, or command usage."""


class ShapeError(BamforgeError):
    """Tensor/weight shape mismatch."""


class NumericError(BamforgeError):
    """Non-finite values or other numeric-domain failures."""


class SurgeryError(BamforgeError):
    """Checkpoint surgery (branch/merge/upcycle) violation."""

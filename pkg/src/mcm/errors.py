"""Exception taxonomy shared by all modules.

Errors are split by what went wrong, not where: shape/layout problems are
structural, non-finite values are numeric, violated call preconditions are
contract errors, bad user-supplied settings are config errors, and malformed
files are format errors.
"""


class McmError(Exception):
    """Base class for all package errors."""


class StructuralError(McmError):
    """Shape, layout, or segment-alignment mismatch."""


class NumericError(McmError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(McmError):
    """A caller violated an operation's precondition."""


class ConfigError(McmError):
    """An invalid configuration value or key."""


class FormatError(McmError):
    """A malformed serialized file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset

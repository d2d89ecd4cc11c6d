"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError (and subclasses) -> 2, everything else -> 1.
"""


class MoepotError(Exception):
    """Base class for all package errors."""


class ConfigError(MoepotError):
    """Invalid configuration or usage (bad hyperparameters, unknown keys, ...)."""


class ConfigConflictError(ConfigError):
    """A checkpoint's stored configuration conflicts with the requested one."""


class ContractError(MoepotError):
    """A caller violated an operation's contract (shape mismatch, bad range, ...)."""


class NumericError(MoepotError):
    """Non-finite values, undefined metrics, or broken numeric invariants."""


class FormatError(MoepotError):
    """Base for binary file-format problems."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload is complete."""


class ChecksumError(FormatError):
    """Stored checksum does not match the file contents."""

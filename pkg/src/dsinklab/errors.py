"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
I/O and checksum problems exit 3, numerical aborts exit 4.
"""


class DsinkLabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DsinkLabError):
    """Invalid, missing, or unparseable configuration."""


class MalformedFileError(DsinkLabError):
    """Artifact file is truncated, has bad magic, or an unknown version."""


class ChecksumError(MalformedFileError):
    """CRC mismatch, or an artifact consumed against the wrong dataset."""


class NumericalBreakdownError(DsinkLabError):
    """A scaling vector became nonfinite during Sinkhorn iteration."""


class TrainingDivergedError(DsinkLabError):
    """A training loss became nonfinite; carries epoch/batch diagnostics."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class OracleError(DsinkLabError):
    """A reference oracle was given an oversized instance or failed to converge."""

"""Exception taxonomy shared by every module.

Each class carries a short ``code`` used by the command line to emit a
stable one-line prefix (``emma: error[<code>]: ...``) and an exit status.
"""


class EmmaError(Exception):
    code = "error"
    exit_status = 1


class DimensionError(EmmaError, ValueError):
    """Tensor or volume extents are incompatible with an operation."""

    code = "dimension"
    exit_status = 3


class UsageError(EmmaError, ValueError):
    code = "usage"
    exit_status = 2


class DataError(EmmaError, ValueError):
    """Input data is degenerate (empty mask, zero variance, bad labels...)."""

    code = "data"
    exit_status = 4


class ParameterError(EmmaError, ValueError):
    code = "parameter"
    exit_status = 2


class ConfigError(EmmaError, ValueError):
    code = "config"
    exit_status = 2


class NonFiniteError(EmmaError, FloatingPointError):
    """A NaN or infinity appeared in a loss or gradient."""

    code = "nonfinite"
    exit_status = 5


class FormatError(EmmaError):
    """File does not start with the expected magic bytes or has a bad header."""

    code = "format"
    exit_status = 6


class TruncatedError(FormatError):
    code = "truncated"
    exit_status = 7


class ChecksumError(FormatError):
    code = "checksum"
    exit_status = 8


class CheckpointError(EmmaError):
    """Checkpoint missing, or its contents do not match the expected network."""

    code = "checkpoint"
    exit_status = 9

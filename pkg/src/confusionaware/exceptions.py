"""Shared exception types.

Every error raised by the public API derives from ConfusionAwareError and
carries a short machine-readable ``code`` used by the CLI error prefix.
"""


class ConfusionAwareError(Exception):
    code = "internal"


class InsufficientDataError(ConfusionAwareError, ValueError):
    code = "insufficient-data"


class DimensionError(ConfusionAwareError, ValueError):
    code = "dimension"


class EmptyInputError(ConfusionAwareError, ValueError):
    code = "empty-input"


class InsufficientClassesError(ConfusionAwareError, ValueError):
    code = "insufficient-classes"


class InsufficientBatchError(ConfusionAwareError, ValueError):
    code = "insufficient-batch"


class InsufficientPointsError(ConfusionAwareError, ValueError):
    code = "insufficient-points"


class StratificationError(ConfusionAwareError, ValueError):
    code = "stratification"


class SamplingError(ConfusionAwareError, ValueError):
    code = "sampling"


class ConfigError(ConfusionAwareError, ValueError):
    code = "config"


class CacheError(ConfusionAwareError, RuntimeError):
    code = "stale-cache"


class FileFormatError(ConfusionAwareError, ValueError):
    code = "format"


class BadMagicError(FileFormatError):
    code = "bad-magic"


class TruncatedFileError(FileFormatError):
    code = "truncated"


class VersionMismatchError(FileFormatError):
    code = "version-mismatch"


class UnlabeledInputError(ConfusionAwareError, ValueError):
    code = "unlabeled-input"

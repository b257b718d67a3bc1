# mlaforge/utils/errors.py
from typing import Optional


class MlaForgeError(Exception):
    """
    Base class for every error the toolkit raises on purpose.
    The CLI maps `exit_code` straight to the process status.
    """

    exit_code = 1
    code = "error"


class ConfigError(MlaForgeError):
    exit_code = 2
    code = "config"


class UsageError(MlaForgeError):
    exit_code = 2
    code = "usage"


class VariantMismatchError(MlaForgeError):
    """Checkpoint, forward variant and cache kind do not fit together."""

    exit_code = 2
    code = "variant_mismatch"


class ShapeError(MlaForgeError, ValueError):
    exit_code = 2
    code = "shape"


class RankError(ShapeError):
    code = "rank"


class FormatError(MlaForgeError):
    exit_code = 3
    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "bad_version"


class ManifestMismatchError(FormatError):
    code = "manifest_mismatch"

    def __init__(self, message: str, tensor_name: Optional[str] = None):
        super().__init__(message)
        self.tensor_name = tensor_name


class TruncatedFileError(FormatError):
    code = "truncated"


class StatsSchemaError(FormatError):
    code = "stats_schema"


class CorpusError(FormatError):
    code = "corpus"


class VerificationError(MlaForgeError):
    exit_code = 4
    code = "verification"


class ConvergenceError(MlaForgeError):
    exit_code = 5
    code = "convergence"

    def __init__(self, message: str, sweeps: int):
        super().__init__(message)
        self.sweeps = sweeps

class TsnError(Exception):
    """Base class for every error raised by the engine"""


class InvalidArgumentError(TsnError, ValueError):
    """Bad shapes, out-of-range values or unknown options"""


class InvalidConfigError(InvalidArgumentError):
    """An experiment/backbone/train config failed validation"""


class StateError(TsnError, RuntimeError):
    """An operation was called in the wrong lifecycle state"""


class FrozenBankError(StateError):
    """Attempt to mutate a frozen normalization bank"""


class CorruptedBankError(TsnError):
    """Stored normalization statistics are unusable (non-positive variance, NaN)"""


class UndefinedCorrelationError(TsnError, ValueError):
    """Rank correlation is undefined (too few samples or constant ranks)"""


class CheckpointError(TsnError):
    """Base class for checkpoint load failures; `code` tells them apart"""
    code = 'checkpoint'


class CheckpointVersionError(CheckpointError):
    code = 'version-mismatch'


class CheckpointTruncatedError(CheckpointError):
    code = 'truncated'


class ChecksumError(CheckpointError):
    code = 'checksum'

"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Raised when a model or pipeline configuration is inconsistent."""


class RecordParseError(ValueError):
    """Raised when a WFDB-style header or signal file cannot be parsed."""


class TruncatedRecordError(RecordParseError):
    """Raised when the signal byte count disagrees with the header."""


class UnsupportedFormatError(RecordParseError):
    """Raised for WFDB storage formats other than 16."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint directory is missing, corrupt or mismatched."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, step=None, lr=None, batch_ids=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.batch_ids = batch_ids

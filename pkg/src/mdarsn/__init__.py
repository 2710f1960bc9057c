"""Multilabel ECG classification with lead attention and feature-statistics mixing."""

from .estimator import EcgPreprocessor, MDARsnClassifier
from .exceptions import (CheckpointError, ConfigurationError, RecordParseError,
                         TrainingDivergedError, TruncatedRecordError, UnsupportedFormatError)
from .ingest import EcgRecord, PreprocessConfig, preprocess, read_record
from .metrics import ScoreWeights, challenge_score, macro_average_precision
from .network import MDARsn, ModelConfig
from .train import TrainConfig, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigurationError", "EcgPreprocessor", "EcgRecord", "MDARsn",
    "MDARsnClassifier", "ModelConfig", "PreprocessConfig", "RecordParseError", "ScoreWeights",
    "TrainConfig", "TrainingDivergedError", "TruncatedRecordError", "UnsupportedFormatError",
    "challenge_score", "lr_at", "macro_average_precision", "preprocess", "read_record",
    "train_loop",
]

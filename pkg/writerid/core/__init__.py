"""
Data-side domain logic: manifest, curation, preprocessing and splits.
"""

from .errors import (
    WriterIdError,
    ConfigError,
    DataError,
    ManifestError,
    CheckpointError,
    TrainingAborted,
    VerificationFailed,
    ShapeError,
    UndefinedMetricError,
)

__all__ = [
    'WriterIdError',
    'ConfigError',
    'DataError',
    'ManifestError',
    'CheckpointError',
    'TrainingAborted',
    'VerificationFailed',
    'ShapeError',
    'UndefinedMetricError',
]

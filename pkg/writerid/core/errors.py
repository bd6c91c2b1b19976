"""
Error hierarchy for the toolkit.
Every error carries the process exit code the CLI reports for it.
"""

from typing import List, Optional


class WriterIdError(Exception):
    """Base class for toolkit failures surfaced to the CLI."""

    exit_code: int = 1

    def __init__(self, message: str, offenders: Optional[List[str]] = None):
        super().__init__(message)
        self.offenders = list(offenders or [])

    def one_line(self) -> str:
        """Machine-parsable single-line description."""
        reason = str(self).replace('"', "'").replace("\n", " ")
        return f'error code={self.exit_code} kind={type(self).__name__} reason="{reason}"'


class ConfigError(WriterIdError):
    """Invalid run configuration or command-line arguments."""

    exit_code = 2


class DataError(WriterIdError):
    """Corpus, manifest or split content is unusable."""

    exit_code = 3


class ManifestError(DataError):
    """Manifest construction failed (missing images, duplicate ids)."""


class CheckpointError(DataError):
    """Checkpoint does not match the model it is loaded into."""


class TrainingAborted(WriterIdError):
    """Training stopped on a non-finite loss or another unrecoverable state."""

    exit_code = 4


class VerificationFailed(WriterIdError):
    """A split failed structural verification."""

    exit_code = 5


class ShapeError(ValueError):
    """Tensor does not satisfy a module's shape contract."""


class UndefinedMetricError(ValueError):
    """A metric was requested over an empty prediction set."""

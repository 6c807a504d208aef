"""Custom exceptions for the package."""

from __future__ import annotations

from pathlib import Path


class LesionStackError(Exception):
    """Base exception for errors in this package."""


class ConfigurationError(LesionStackError):
    """Raised for invalid specs or configuration documents."""


class DataError(LesionStackError):
    """Base exception for bad or missing input data."""


class VolumeIOError(DataError):
    """Raised when a volume cannot be read or written."""

    def __init__(self, message: str, path: str | Path) -> None:
        """Attach the offending path to the message."""
        self.path = Path(path)
        super().__init__(f"{message}: {self.path}")


class FindingsFormatError(DataError):
    """Raised for malformed findings CSV content."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        """Attach the offending line number to the message."""
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ManifestError(DataError):
    """Raised for invalid cohort or stage manifests."""


class PatchGeometryError(DataError):
    """Raised when a patch does not fit inside its volume."""


class AlignmentError(DataError):
    """Raised when modalities disagree on a finding's voxel."""


class CheckpointError(DataError):
    """Raised for missing or inconsistent model checkpoints."""


class MissingArtifactError(DataError):
    """Raised when a stage's upstream outputs do not exist."""

    def __init__(self, message: str, stage: str) -> None:
        """Name the stage that has to run first."""
        self.stage = stage
        super().__init__(f"{message} (run `{stage}` first)")


class StaleArtifactError(DataError):
    """Raised when upstream outputs changed since they were consumed."""

    def __init__(self, message: str, stage: str) -> None:
        """Name the stage that has to be rerun."""
        self.stage = stage
        super().__init__(f"{message} (rerun `{stage}`)")


class NumericError(LesionStackError):
    """Base exception for numerical failures."""


class GraphError(NumericError):
    """Raised for invalid use of the differentiation graph."""


class FrozenModelError(NumericError):
    """Raised when a frozen base model was modified."""


class ReportError(LesionStackError):
    """Raised when reports cannot be rendered."""


class PandocError(ReportError):
    """Base exception for Pandoc related errors."""


class PandocNotInstalledError(PandocError):
    """Raised when pypandoc is not installed but required."""


class PandocConversionError(PandocError):
    """Raised when pypandoc fails to convert a file."""

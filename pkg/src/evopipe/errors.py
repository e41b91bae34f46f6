"""Exception hierarchy for evopipe."""

from __future__ import annotations


class EvopipeError(Exception):
    """Base class for every error raised by evopipe."""


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class DatasetError(EvopipeError):
    """A dataset could not be loaded, split or scored."""


class DatasetParseError(DatasetError):
    """A dataset file failed to parse at a known location."""

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None) -> None:
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column!r}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.row = row
        self.column = column


class FetchError(DatasetError):
    """A remote dataset download failed."""

    def __init__(self, message: str, *, status: int | None = None) -> None:
        super().__init__(message if status is None else f"{message} (HTTP {status})")
        self.status = status


# ---------------------------------------------------------------------------
# Learners and operators
# ---------------------------------------------------------------------------


class LearnerError(EvopipeError):
    """A learner was misused or failed."""


class LearnerFitError(LearnerError):
    """Training diverged or otherwise failed."""


class DimensionMismatchError(LearnerError):
    """Input width or length does not match what a model expects."""


class HyperparameterError(EvopipeError):
    """A hyperparameter assignment is outside its declared space."""


class RegistryError(EvopipeError):
    """An operator registry request is contradictory or invalid."""


class TemplateError(EvopipeError):
    """A template string cannot be parsed or satisfied."""


# ---------------------------------------------------------------------------
# Pipelines and artifacts
# ---------------------------------------------------------------------------


class PipelineFitError(EvopipeError):
    """A node failed while fitting a pipeline."""

    def __init__(self, path: str, cause: BaseException) -> None:
        super().__init__(f"node {path}: {cause}")
        self.path = path
        self.cause = cause


class ArtifactError(EvopipeError):
    """An export artifact is unusable."""


class ArtifactParseError(ArtifactError):
    """An export artifact is malformed."""

    def __init__(self, message: str, *, line: int, column: int = 1) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ArtifactVersionError(ArtifactError):
    """An export artifact declares an unsupported format version."""


class ArtifactValidationError(ArtifactError):
    """An export artifact parsed but describes an invalid pipeline."""


# ---------------------------------------------------------------------------
# Evolution and experiments
# ---------------------------------------------------------------------------


class EvaluationTimeout(EvopipeError):
    """An evaluation exceeded its wall-clock budget."""


class ConfigError(EvopipeError):
    """An experiment or GP configuration is inconsistent."""


class ResultFileError(EvopipeError):
    """A result file could not be written or read."""

    def __init__(self, message: str, *, path: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path

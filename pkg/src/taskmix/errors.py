"""Exception types shared across the package."""


class TaskmixError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TaskmixError):
    """Invalid or inconsistent configuration values."""


class DimensionError(TaskmixError):
    """Tensor shape mismatch."""


class LabelError(TaskmixError):
    """Class label outside the valid range."""


class ProgressError(TaskmixError):
    """Training progress outside [0, 1] or iteration past the end of a run."""


class DataError(TaskmixError):
    """Invalid dataset contents or an operation on an unsuitable dataset."""


class IngestionError(DataError):
    """Malformed record found while loading an exported dataset.

    `line` is the 1-based line number in examples.jsonl when the failure
    is attributable to a single record, else None.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InputError(TaskmixError):
    """An example cannot be assembled into a model input sequence."""


class CheckpointError(TaskmixError):
    """Checkpoint file missing, corrupt, or incompatible with the config."""


class EvaluationError(TaskmixError):
    """Model/dataset pair cannot be evaluated."""


class ComparisonError(TaskmixError):
    """Metric reports cannot be compared (e.g. disjoint task sets)."""

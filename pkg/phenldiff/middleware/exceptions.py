"""
Custom exceptions for phenldiff.

Every error raised on purpose by the package derives from PhenLDiffError and
carries a category (config | data | numerical | io) that the CLI error
handler maps to an exit code.
"""

from typing import Any, Optional, Sequence


CATEGORY_CONFIG = "config"
CATEGORY_DATA = "data"
CATEGORY_NUMERICAL = "numerical"
CATEGORY_IO = "io"


class PhenLDiffError(Exception):
    """Base exception for package errors."""

    category: str = CATEGORY_DATA

    def __init__(self, detail: str, category: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if category is not None:
            self.category = category

    def __str__(self) -> str:
        return self.detail


class ConfigError(PhenLDiffError):
    """Raised when a configuration value is invalid."""

    category = CATEGORY_CONFIG

    def __init__(self, field: str, detail: str):
        super().__init__(f"Invalid configuration for '{field}': {detail}")
        self.field = field


class ShapeError(PhenLDiffError):
    """Raised when tensor shapes disagree."""

    category = CATEGORY_DATA

    def __init__(self, expected: Sequence[int], actual: Sequence[int], what: str = "tensor"):
        super().__init__(
            f"Shape mismatch for {what}: expected {tuple(expected)}, got {tuple(actual)}"
        )
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class DataError(PhenLDiffError):
    """Raised when input data is unusable."""

    category = CATEGORY_DATA


class UnregisteredConditionError(DataError):
    """Raised when a class label is not registered with the model."""

    def __init__(self, label: int, n_registered: int):
        super().__init__(
            f"Condition label {label} is not registered. Registered labels: 0..{n_registered - 1}"
        )
        self.label = label


class InsufficientDataError(DataError):
    """Raised when a dataset is too small for the requested operation."""

    def __init__(self, required: int, available: int, what: str = "items"):
        super().__init__(
            f"Insufficient {what}. Required: {required}, Available: {available}"
        )
        self.required = required
        self.available = available


class UndefinedMeasureError(DataError):
    """Raised when a measurement or metric is undefined for its input."""

    def __init__(self, measure: str, detail: str):
        super().__init__(f"{measure} is undefined: {detail}")
        self.measure = measure


class NumericalError(PhenLDiffError):
    """Raised on non-finite values or singular computations."""

    category = CATEGORY_NUMERICAL

    def __init__(
        self,
        detail: str,
        timestep: Optional[int] = None,
        condition: Optional[Any] = None,
        target: Optional[str] = None,
    ):
        context = []
        if timestep is not None:
            context.append(f"timestep={timestep}")
        if condition is not None:
            context.append(f"condition={condition}")
        if target is not None:
            context.append(f"target={target}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{detail}{suffix}")
        self.timestep = timestep
        self.condition = condition
        self.target = target


class AdapterError(PhenLDiffError):
    """Raised on invalid adapter bookkeeping such as merging twice."""

    category = CATEGORY_CONFIG


class StorageError(PhenLDiffError):
    """Raised when reading or writing an artifact fails."""

    category = CATEGORY_IO

    def __init__(self, path: Any, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path


class MissingArtifactError(PhenLDiffError):
    """Raised when a required checkpoint or dataset does not exist yet."""

    category = CATEGORY_DATA

    def __init__(self, artifact: Any, producing_command: str):
        super().__init__(
            f"Missing {artifact}. Produce it first with: {producing_command}"
        )
        self.artifact = artifact
        self.producing_command = producing_command


class StageError(PhenLDiffError):
    """Raised when a pipeline stage fails; keeps the cause's category."""

    def __init__(self, stage: str, cause: Exception):
        if isinstance(cause, PhenLDiffError):
            category = cause.category
        elif isinstance(cause, OSError):
            category = CATEGORY_IO
        else:
            category = CATEGORY_DATA
        super().__init__(f"Stage '{stage}' failed: {cause}", category=category)
        self.stage = stage
        self.cause = cause

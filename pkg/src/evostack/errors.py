"""Exception hierarchy shared across the package."""

from __future__ import annotations


class EvostackError(Exception):
    """Base class for all package errors."""


class ValidationError(EvostackError, ValueError):
    """Invalid configuration, arguments, or input data."""


class ContractViolation(EvostackError, ValueError):
    """A caller broke an operation's precondition."""


class EvaluationError(EvostackError):
    """A fitness evaluator failed; carries the offending canonical key."""

    def __init__(self, key: str, cause: BaseException):
        super().__init__(f"fitness evaluation failed for {key}: {cause}")
        self.key = key
        self.cause = cause


class TrainingDivergence(EvostackError, FloatingPointError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, *, epoch: int | None = None,
                 batch: int | None = None, fold: int | None = None):
        parts = [message]
        if fold is not None:
            parts.append(f"fold={fold}")
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if batch is not None:
            parts.append(f"batch={batch}")
        super().__init__(" ".join(parts))
        self.epoch = epoch
        self.batch = batch
        self.fold = fold


class DatasetError(EvostackError):
    """Base for on-disk dataset problems."""


class ManifestError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class DatasetValidationError(DatasetError, ValidationError):
    pass


class CheckpointError(EvostackError):
    pass

"""Exception hierarchy shared by every module.

Each exception carries a stable ``error_class`` string; the CLI prints it as
the machine-parsable prefix of its one-line failure message.
"""

from __future__ import annotations


class DistillError(Exception):
    error_class = "ERROR"


class ConfigError(DistillError, ValueError):
    error_class = "CONFIG_INVALID"


class ShapeError(DistillError, ValueError):
    error_class = "SHAPE_MISMATCH"


class TeacherMismatchError(DistillError, ValueError):
    error_class = "TEACHER_MISMATCH"


class EmptyInputError(DistillError, ValueError):
    error_class = "EMPTY_INPUT"


class CacheMissingError(DistillError, FileNotFoundError):
    error_class = "CACHE_MISSING"


class ChecksumError(DistillError):
    error_class = "CHECKSUM_MISMATCH"


class FingerprintMismatchError(DistillError):
    error_class = "FINGERPRINT_MISMATCH"


class CheckpointVersionError(DistillError):
    error_class = "CHECKPOINT_VERSION"


class TrainingDivergedError(DistillError, FloatingPointError):
    error_class = "TRAINING_DIVERGED"

    def __init__(self, message: str, step: int, indices: list[int]):
        super().__init__(message)
        self.step = step
        self.indices = indices

"""
Exception hierarchy shared by every module.
The CLI maps ``exit_code`` to the process status.
"""

from typing import Optional


class MtlSwinError(Exception):
    """Base error"""
    exit_code = 1


class ConfigError(MtlSwinError, ValueError):
    exit_code = 2


class DatasetError(MtlSwinError):
    exit_code = 3


class ShapeError(MtlSwinError, ValueError):
    exit_code = 1


class NumericsError(MtlSwinError):
    exit_code = 4


class NonFiniteError(NumericsError):
    pass


class NonDeterministicError(NumericsError):
    pass


class TrainingDivergedError(NumericsError):
    """Loss became NaN/Inf during training"""

    def __init__(self, iteration: int, message: Optional[str] = None):
        self.iteration = iteration
        super().__init__(message or f"Training diverged at iteration {iteration}")


class CheckpointError(MtlSwinError):
    exit_code = 5


class ArchitectureMismatchError(MtlSwinError):
    exit_code = 5

#!/usr/bin/env python3
"""
Exception types shared by the measurement-selection pipeline.
"""

from typing import Optional, Tuple

import numpy as np


class InvalidArgumentError(ValueError):
    """Argument outside the documented domain of an operation."""


class InvalidStateError(RuntimeError):
    """Operation would leave an object in an impossible state."""


class ConfigError(ValueError):
    """Experiment configuration could not be parsed or validated."""


class CacheError(RuntimeError):
    """Transfer cache file unreadable, truncated or keyed for other inputs."""


class SingularSystemError(np.linalg.LinAlgError):
    """
    A regularized per-frequency block was not positive definite.

    Args:
        message: Human readable description
        frequency_index: Flat index of the offending frequency
        frequency: (ky, kx) position of the offending frequency
    """

    def __init__(self, message: str, frequency_index: Optional[int] = None,
                 frequency: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.frequency_index = frequency_index
        self.frequency = frequency


class LambdaSearchError(RuntimeError):
    """Experiment closure failed during the λ search."""

    def __init__(self, message: str, lambda_reg: float):
        super().__init__(message)
        self.lambda_reg = lambda_reg


class StageError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def numerical(self) -> bool:
        return isinstance(self.cause, (np.linalg.LinAlgError, FloatingPointError))

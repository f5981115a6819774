"""
Scene Fusion - Exception hierarchy.

Every error raised by the library derives from SceneFusionError. Each family
carries the exit code the command-line surface reports for it.
"""

from __future__ import annotations

from typing import Sequence, Tuple


class SceneFusionError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1


# =============================================================================
# Numeric errors
# =============================================================================


class NumericError(SceneFusionError):
    """A numeric contract was violated."""


class DimensionError(NumericError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        shape_str = " and ".join("x".join(str(d) for d in s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shape_str}")


class DegenerateRowError(NumericError):
    """A softmax row has no unmasked entries."""

    def __init__(self, rows: Sequence[int]):
        self.rows = list(rows)
        super().__init__(f"softmax rows fully masked: {self.rows}")


class ContractError(NumericError):
    """A pre-condition of an operation does not hold."""


class EvaluationError(NumericError):
    """A function under evaluation produced a non-finite value."""


class NonFiniteError(NumericError):
    """An operation produced NaN or Inf."""


# =============================================================================
# Configuration, data and checkpoint errors
# =============================================================================


class ConfigError(SceneFusionError):
    """Invalid configuration value, key or stage."""

    exit_code = 2


class DataError(SceneFusionError):
    """Invalid raster, manifest or dataset content."""

    exit_code = 3


class ParseError(DataError):
    """A document or binary payload could not be parsed."""

    def __init__(self, message: str, context: str = ""):
        self.context = context
        super().__init__(f"{message} ({context})" if context else message)


class SampleError(DataError):
    """A dataset sample failed validation."""

    def __init__(self, sample_id: str, message: str):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id!r}: {message}")


class CheckpointError(SceneFusionError):
    """A checkpoint could not be written or read back."""

    exit_code = 4


__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateRowError",
    "DimensionError",
    "EvaluationError",
    "NonFiniteError",
    "NumericError",
    "ParseError",
    "SampleError",
    "SceneFusionError",
]

"""
Scene Fusion - Dense 2-D tensors.

Tensor2D is the immutable value type carried through the numeric core: a
row-major real matrix in one of two precisions. The binary layout below is the
one embedded in checkpoints.

Binary layout (little-endian):
    magic "TSG1" | u32 rows | u32 cols | u8 precision tag | rows*cols values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from scene_fusion.errors import NonFiniteError, ParseError

TENSOR_MAGIC = b"TSG1"
_HEADER = struct.Struct("<4sIIB")


class Precision(Enum):
    """Storage precision of a tensor."""

    TEST = "test"  # 64-bit, used by gradient oracles
    DEFAULT = "default"  # 32-bit, used for training

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self is Precision.TEST else np.float32)

    @property
    def tag(self) -> int:
        return 0 if self is Precision.TEST else 1

    @staticmethod
    def from_tag(tag: int) -> Precision:
        if tag == 0:
            return Precision.TEST
        if tag == 1:
            return Precision.DEFAULT
        raise ParseError(f"unknown precision tag {tag}", "tensor header")

    @staticmethod
    def of(array: np.ndarray) -> Precision:
        return Precision.TEST if array.dtype == np.float64 else Precision.DEFAULT


@dataclass(frozen=True, eq=False)
class Tensor2D:
    """Immutable row-major real matrix."""

    data: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.data)
        if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] < 1:
            raise ValueError(f"Tensor2D needs a non-empty 2-D array, got {array.shape}")
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("tensor contains NaN or Inf")
        array = np.ascontiguousarray(array)
        if array is self.data:
            array = array.copy()
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data)

    @property
    def flat(self) -> np.ndarray:
        """Row-major values, length rows*cols."""
        return self.data.reshape(-1)

    @classmethod
    def from_rows(
        cls, rows: Sequence[Sequence[float]], precision: Precision = Precision.TEST
    ) -> Tensor2D:
        return cls(np.array(rows, dtype=precision.dtype).reshape(len(rows), -1))

    @classmethod
    def zeros(
        cls, rows: int, cols: int, precision: Precision = Precision.DEFAULT
    ) -> Tensor2D:
        return cls(np.zeros((rows, cols), dtype=precision.dtype))

    @classmethod
    def full(
        cls, rows: int, cols: int, value: float, precision: Precision = Precision.DEFAULT
    ) -> Tensor2D:
        return cls(np.full((rows, cols), value, dtype=precision.dtype))

    @classmethod
    def eye(cls, n: int, precision: Precision = Precision.DEFAULT) -> Tensor2D:
        return cls(np.eye(n, dtype=precision.dtype))

    def astype(self, precision: Precision) -> Tensor2D:
        if precision is self.precision:
            return self
        return Tensor2D(self.data.astype(precision.dtype))

    def to_list(self) -> List[List[float]]:
        return [[float(v) for v in row] for row in self.data]

    def bit_equal(self, other: Tensor2D) -> bool:
        """Same shape, precision and bytes."""
        return (
            self.shape == other.shape
            and self.precision is other.precision
            and self.data.tobytes() == other.data.tobytes()
        )

    def allclose(self, other: Tensor2D, atol: float = 1e-9) -> bool:
        return self.shape == other.shape and bool(
            np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(TENSOR_MAGIC, self.rows, self.cols, self.precision.tag)
        values = self.data.astype(self.precision.dtype.newbyteorder("<"), copy=False)
        return header + values.tobytes(order="C")

    @classmethod
    def from_bytes(cls, payload: bytes, offset: int = 0) -> Tuple[Tensor2D, int]:
        """Decode one tensor starting at offset; returns (tensor, next offset)."""
        if len(payload) - offset < _HEADER.size:
            raise ParseError("truncated tensor header", f"offset {offset}")
        magic, rows, cols, tag = _HEADER.unpack_from(payload, offset)
        if magic != TENSOR_MAGIC:
            raise ParseError(f"bad tensor magic {magic!r}", f"offset {offset}")
        if rows < 1 or cols < 1:
            raise ParseError(f"bad tensor shape {rows}x{cols}", f"offset {offset}")
        precision = Precision.from_tag(tag)
        dtype = precision.dtype.newbyteorder("<")
        start = offset + _HEADER.size
        end = start + rows * cols * dtype.itemsize
        if end > len(payload):
            raise ParseError("truncated tensor values", f"offset {offset}")
        values = np.frombuffer(payload, dtype=dtype, count=rows * cols, offset=start)
        array = values.astype(precision.dtype).reshape(rows, cols)
        return cls(array), end

    def __repr__(self) -> str:
        return f"Tensor2D({self.rows}x{self.cols}, {self.precision.value})"


def stack_rows(tensors: Iterable[Tensor2D]) -> Tensor2D:
    """Concatenate tensors vertically."""
    return Tensor2D(np.vstack([t.data for t in tensors]))


__all__ = ["TENSOR_MAGIC", "Precision", "Tensor2D", "stack_rows"]

"""Dense tensor container and packed binary masks.

Tensors store their computational form as read-only float32 (all kernels
compute in float32 regardless of the checkpoint storage dtype) plus the
storage dtype tag used when the tensor is written back out. Instances are
immutable after construction and safe to share across worker threads.
"""

from __future__ import annotations

import math

import numpy as np

from .alloc import tracker
from .dtypes import DType, encode_from_f32
from .errors import ShapeMismatchError, ValidationError


def _check_shape(shape: tuple[int, ...]) -> None:
    for dim in shape:
        if int(dim) <= 0:
            raise ValidationError(f"tensor dimensions must be positive, got {shape}")


class Tensor:
    __slots__ = ("shape", "dtype", "values", "__weakref__")

    def __init__(self, values: np.ndarray, dtype: DType = DType.float32):
        values = np.ascontiguousarray(values, dtype=np.float32)
        _check_shape(values.shape)
        values.flags.writeable = False
        self.shape = tuple(int(d) for d in values.shape)
        self.dtype = dtype
        self.values = values
        tracker.track(self, values.nbytes)

    @property
    def numel(self) -> int:
        return int(self.values.size)

    @property
    def storage_nbytes(self) -> int:
        return self.numel * self.dtype.byte_width

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def storage_bytes(self) -> bytes:
        """Little-endian buffer in the storage dtype."""
        return encode_from_f32(self.values, self.dtype)

    @classmethod
    def zeros(cls, shape, dtype: DType = DType.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32), dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


class BinaryMask:
    """One bit per element, packed little-endian within each byte."""

    __slots__ = ("shape", "bits", "_numel")

    def __init__(self, shape: tuple[int, ...], bits: np.ndarray):
        _check_shape(tuple(shape))
        self.shape = tuple(int(d) for d in shape)
        self._numel = math.prod(self.shape)
        expected = (self._numel + 7) // 8
        if bits.dtype != np.uint8 or bits.size != expected:
            raise ValidationError(
                f"mask bit buffer must be {expected} uint8 bytes for shape {self.shape}"
            )
        self.bits = bits

    @classmethod
    def from_bool(cls, flags: np.ndarray) -> "BinaryMask":
        flags = np.asarray(flags)
        packed = np.packbits(flags.reshape(-1).astype(bool), bitorder="little")
        return cls(tuple(flags.shape), packed)

    def to_bool(self) -> np.ndarray:
        flat = np.unpackbits(self.bits, count=self._numel, bitorder="little")
        return flat.reshape(self.shape).astype(bool)

    @property
    def numel(self) -> int:
        return self._numel

    def popcount(self) -> int:
        return int(np.unpackbits(self.bits, count=self._numel, bitorder="little").sum())

    def apply(self, t: Tensor) -> Tensor:
        """Zero the tensor outside the mask."""
        if t.shape != self.shape:
            raise ShapeMismatchError("<mask>", self.shape, t.shape)
        out = np.where(self.to_bool(), t.values, np.float32(0.0))
        return Tensor(out, t.dtype)

    def __repr__(self) -> str:
        return f"BinaryMask(shape={self.shape}, popcount={self.popcount()})"

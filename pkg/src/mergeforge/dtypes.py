"""Storage dtypes and their byte-level codecs.

All computation happens in float32; these codecs convert between the
storage representation found in checkpoint files and float32 arrays.
bfloat16 has no numpy dtype, so it is handled through its uint16 bit
pattern (truncation-with-round-to-nearest-even on encode, zero-extension
on decode, both exact for values that originated as bfloat16).
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import UnsupportedDtypeError


class DType(enum.Enum):
    float32 = "F32"
    float16 = "F16"
    bfloat16 = "BF16"
    uint8 = "U8"  # only valid in stats files (binary masks), not checkpoints

    @property
    def code(self) -> str:
        """Dtype string used in checkpoint file headers."""
        return self.value

    @property
    def byte_width(self) -> int:
        if self is DType.float32:
            return 4
        if self is DType.uint8:
            return 1
        return 2

    @classmethod
    def from_code(cls, code: str) -> "DType":
        for member in cls:
            if member.value == code:
                return member
        raise UnsupportedDtypeError(
            f"unsupported tensor dtype {code!r} (supported: F32, F16, BF16, U8)"
        )


#: dtypes allowed in model checkpoints
CHECKPOINT_DTYPES = frozenset({DType.float32, DType.float16, DType.bfloat16})


def decode_to_f32(raw: bytes | np.ndarray, dtype: DType, shape: tuple[int, ...]) -> np.ndarray:
    """Decode a little-endian storage buffer into a float32 C-order array."""
    buf = np.frombuffer(raw, dtype=np.uint8) if isinstance(raw, (bytes, bytearray, memoryview)) else raw
    if dtype is DType.float32:
        out = buf.view(np.dtype("<f4")).astype(np.float32, copy=True)
    elif dtype is DType.float16:
        out = buf.view(np.dtype("<f2")).astype(np.float32)
    elif dtype is DType.uint8:
        out = buf.astype(np.float32)
    else:
        u16 = buf.view(np.dtype("<u2")).astype(np.uint32)
        out = (u16 << np.uint32(16)).view(np.float32)
    return np.ascontiguousarray(out.reshape(shape))


def encode_from_f32(values: np.ndarray, dtype: DType) -> bytes:
    """Encode a float32 array into the little-endian storage buffer."""
    flat = np.ascontiguousarray(values, dtype=np.float32).ravel()
    if dtype is DType.float32:
        return flat.astype("<f4").tobytes()
    if dtype is DType.float16:
        with np.errstate(over="ignore"):  # out-of-range values saturate to inf
            return flat.astype(np.float16).astype("<f2").tobytes()
    if dtype is DType.uint8:
        return np.rint(flat).astype(np.uint8).tobytes()
    u32 = flat.view(np.uint32)
    nan = np.isnan(flat)
    # round to nearest even on the truncated 16 bits
    bias = np.uint32(0x7FFF) + ((u32 >> np.uint32(16)) & np.uint32(1))
    u16 = ((u32 + bias) >> np.uint32(16)).astype(np.uint16)
    if nan.any():
        # keep sign, force a quiet NaN instead of letting the rounding carry
        # turn the payload into an infinity pattern
        u16[nan] = ((u32[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
    return u16.astype("<u2").tobytes()

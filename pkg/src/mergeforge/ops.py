"""Tensor-level building blocks shared by the merging methods.

Thin wrappers over the kernel backend: validation, threshold selection for
top-k, and Tensor/BinaryMask packaging. The deterministic tie rules live
here: top-k magnitude ties break toward the lower flat index, sign-election
ties elect +1.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ShapeMismatchError, ValidationError
from .kernels import backend
from .tensor import BinaryMask, Tensor


def _require_same_shape(a: Tensor, b: Tensor, key: str = "<tensor>") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(key, a.shape, b.shape)


def axpy_accumulate(acc: Tensor, x: Tensor, c: float) -> Tensor:
    """acc + c*x elementwise, float32 accumulation."""
    _require_same_shape(acc, x)
    out = np.array(acc.values, dtype=np.float32)
    backend.axpy(out.reshape(-1), x.flat(), np.float32(c))
    return Tensor(out, acc.dtype)


def topk_count(numel: int, keep_fraction: float) -> int:
    if not (0.0 < keep_fraction <= 1.0):
        raise ValidationError(f"keep fraction must be in (0, 1], got {keep_fraction}")
    return min(numel, math.ceil(keep_fraction * numel))


def topk_mask_array(values: np.ndarray, keep_fraction: float) -> np.ndarray:
    """uint8 mask of the k = ceil(fraction * numel) largest |values|.

    Ties at the threshold magnitude are filled in ascending flat-index order,
    so the popcount is exactly k and the result is bit-reproducible.
    """
    flat = values.reshape(-1)
    n = flat.shape[0]
    if n == 0:
        raise ValidationError("cannot build a top-k mask for an empty tensor")
    k = topk_count(n, keep_fraction)
    absvals = np.abs(flat)
    out = np.empty(n, dtype=np.uint8)
    if k >= n:
        out[:] = 1
        return out
    thr = np.partition(absvals, n - k)[n - k]
    backend.tie_threshold_mask(absvals, np.float32(thr), k, out)
    return out


def topk_magnitude_mask(t: Tensor, keep_fraction: float) -> BinaryMask:
    mask = topk_mask_array(t.values, keep_fraction)
    return BinaryMask.from_bool(mask.reshape(t.shape) != 0)


def elect_sign(deltas: Sequence[Tensor]) -> Tensor:
    """Per-position dominant direction: +1 if the summed positive magnitude
    is at least the summed negative magnitude, else -1."""
    if not deltas:
        raise ValidationError("sign election needs at least one tensor")
    first = deltas[0]
    for d in deltas[1:]:
        _require_same_shape(first, d)
    n = first.numel
    pos = np.zeros(n, dtype=np.float32)
    neg = np.zeros(n, dtype=np.float32)
    for d in deltas:
        backend.accumulate_pos_neg(d.flat(), pos, neg)
    out = np.empty(n, dtype=np.float32)
    backend.sign_from_totals(pos, neg, out)
    return Tensor(out.reshape(first.shape), first.dtype)

"""Pure numpy implementation of the elementwise merge kernels.

This is the fallback used when the compiled extension is unavailable.
Both backends must stay bit-identical: every operation performs the same
sequence of float32 roundings (one per arithmetic op, no FMA contraction),
and the dropout hash is the same 64-bit counter mix.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U01_SCALE = 1.0 / 9007199254740992.0  # 2**-53


def axpy(acc: np.ndarray, x: np.ndarray, c: float) -> None:
    """acc += c * x, float32, in place."""
    t = x * np.float32(c)
    np.add(acc, t, out=acc)


def scale(x: np.ndarray, c: float) -> None:
    np.multiply(x, np.float32(c), out=x)


def add_accumulate(acc: np.ndarray, a: np.ndarray) -> None:
    np.add(acc, a, out=acc)


def mul_accumulate(acc: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """acc += a * b, float32, in place."""
    t = a * b
    np.add(acc, t, out=acc)


def tie_threshold_mask(absvals: np.ndarray, thr: float, k: int, out: np.ndarray) -> None:
    """Mark the k largest values: everything above thr, then values equal to
    thr in ascending flat-index order until exactly k bits are set."""
    above = absvals > np.float32(thr)
    np.copyto(out, above.view(np.uint8))
    fill = k - int(above.sum())
    if fill > 0:
        eq = np.flatnonzero(absvals == np.float32(thr))
        out[eq[:fill]] = 1


def apply_mask(x: np.ndarray, mask: np.ndarray, out: np.ndarray) -> None:
    np.multiply(x, mask.astype(np.float32), out=out)


def accumulate_pos_neg(d: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> None:
    """pos += max(d, 0); neg += max(-d, 0)."""
    np.add(pos, np.maximum(d, np.float32(0.0)), out=pos)
    np.add(neg, np.maximum(-d, np.float32(0.0)), out=neg)


def sign_from_totals(pos: np.ndarray, neg: np.ndarray, out: np.ndarray) -> None:
    """out = +1 where pos >= neg else -1 (tie elects +1)."""
    np.copyto(out, np.where(pos >= neg, np.float32(1.0), np.float32(-1.0)))


def aligned_sum_count(d: np.ndarray, sign: np.ndarray, ssum: np.ndarray, cnt: np.ndarray) -> None:
    """Where d's sign strictly matches the elected sign: ssum += d, cnt += 1."""
    match = ((d > 0) & (sign > 0)) | ((d < 0) & (sign < 0))
    np.add(ssum, np.where(match, d, np.float32(0.0)), out=ssum)
    np.add(cnt, match.astype(np.float32), out=cnt)


def divide_where_positive(ssum: np.ndarray, cnt: np.ndarray, out: np.ndarray) -> None:
    """out = ssum / cnt where cnt > 0, else 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        np.divide(ssum, cnt, out=out)
    out[cnt <= 0] = np.float32(0.0)


def masked_sum_count(x: np.ndarray, mask: np.ndarray, ssum: np.ndarray, cnt: np.ndarray) -> None:
    m = mask != 0
    np.add(ssum, np.where(m, x, np.float32(0.0)), out=ssum)
    np.add(cnt, m.astype(np.float32), out=cnt)


def consensus_count(tau: np.ndarray, tau_mtl: np.ndarray, lam_i: float, cnt: np.ndarray) -> None:
    """cnt += 1 where |tau| >= |tau_mtl - tau| * lam_i."""
    rhs = np.abs(tau_mtl - tau) * np.float32(lam_i)
    cnt += (np.abs(tau) >= rhs).view(np.uint8)


def add_where_count_ge(base: np.ndarray, x: np.ndarray, cnt: np.ndarray, min_count: int,
                       out: np.ndarray) -> None:
    """out = base + x where cnt >= min_count, else base."""
    np.add(base, np.where(cnt >= min_count, x, np.float32(0.0)), out=out)


def fisher_combine(numer: np.ndarray, denom: np.ndarray, fallback: np.ndarray, eps: float,
                   out: np.ndarray) -> None:
    """out = (numer + eps*fallback) / (denom + eps)."""
    e = np.float32(eps)
    np.divide(numer + e * fallback, denom + e, out=out)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def dare_accumulate(tau: np.ndarray, acc: np.ndarray, key: int, p: float, inv_keep: float,
                    lam: float) -> None:
    """acc += lam * (tau * inv_keep) at positions kept by the counter RNG.

    Element j is dropped iff u01(mix(key + (j+1)*golden)) < p, so the keep
    decision depends only on (key, j) and is independent of scheduling.
    """
    n = tau.shape[0]
    idx = np.arange(1, n + 1, dtype=np.uint64)
    h = _mix64(np.uint64(key) + idx * _GOLDEN)
    u = (h >> np.uint64(11)).astype(np.float64) * _U01_SCALE
    keep = u >= p
    t = tau * np.float32(inv_keep)
    np.multiply(t, np.float32(lam), out=t)
    np.add(acc, np.where(keep, t, np.float32(0.0)), out=acc)

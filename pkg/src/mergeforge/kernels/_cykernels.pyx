# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled elementwise merge kernels.

Bit-identical twin of the numpy backend: same float32 rounding sequence
(the extension is built with -ffp-contract=off so no FMA contraction) and
the same 64-bit counter hash for dropout decisions.
"""

from libc.math cimport fabsf
from libc.stdint cimport uint8_t, uint64_t

import numpy as np

NAME = "cython"

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15u
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9u
cdef uint64_t MIX2 = 0x94D049BB133111EBu
cdef double U01_SCALE = 1.0 / 9007199254740992.0  # 2**-53


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


def axpy(float[::1] acc, const float[::1] x, float c):
    """acc += c * x, float32, in place."""
    cdef Py_ssize_t i, n = acc.shape[0]
    with nogil:
        for i in range(n):
            acc[i] = acc[i] + c * x[i]


def scale(float[::1] x, float c):
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            x[i] = x[i] * c


def add_accumulate(float[::1] acc, const float[::1] a):
    cdef Py_ssize_t i, n = acc.shape[0]
    with nogil:
        for i in range(n):
            acc[i] = acc[i] + a[i]


def mul_accumulate(float[::1] acc, const float[::1] a, const float[::1] b):
    """acc += a * b, float32, in place."""
    cdef Py_ssize_t i, n = acc.shape[0]
    with nogil:
        for i in range(n):
            acc[i] = acc[i] + a[i] * b[i]


def tie_threshold_mask(const float[::1] absvals, float thr, Py_ssize_t k, uint8_t[::1] out):
    """Mark the k largest values: everything above thr, then values equal to
    thr in ascending flat-index order until exactly k bits are set."""
    cdef Py_ssize_t i, n = absvals.shape[0]
    cdef Py_ssize_t above = 0
    with nogil:
        for i in range(n):
            if absvals[i] > thr:
                out[i] = 1
                above += 1
            else:
                out[i] = 0
    cdef Py_ssize_t fill = k - above
    if fill <= 0:
        return
    with nogil:
        for i in range(n):
            if absvals[i] == thr:
                out[i] = 1
                fill -= 1
                if fill == 0:
                    break


def apply_mask(const float[::1] x, const uint8_t[::1] mask, float[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            out[i] = x[i] * <float> mask[i]


def accumulate_pos_neg(const float[::1] d, float[::1] pos, float[::1] neg):
    """pos += max(d, 0); neg += max(-d, 0)."""
    cdef Py_ssize_t i, n = d.shape[0]
    cdef float v
    with nogil:
        for i in range(n):
            v = d[i]
            pos[i] = pos[i] + (v if v > 0.0 else 0.0)
            neg[i] = neg[i] + (-v if -v > 0.0 else 0.0)


def sign_from_totals(const float[::1] pos, const float[::1] neg, float[::1] out):
    """out = +1 where pos >= neg else -1 (tie elects +1)."""
    cdef Py_ssize_t i, n = pos.shape[0]
    with nogil:
        for i in range(n):
            out[i] = 1.0 if pos[i] >= neg[i] else -1.0


def aligned_sum_count(const float[::1] d, const float[::1] sign, float[::1] ssum, float[::1] cnt):
    """Where d's sign strictly matches the elected sign: ssum += d, cnt += 1."""
    cdef Py_ssize_t i, n = d.shape[0]
    cdef bint match
    with nogil:
        for i in range(n):
            match = (d[i] > 0 and sign[i] > 0) or (d[i] < 0 and sign[i] < 0)
            ssum[i] = ssum[i] + (d[i] if match else 0.0)
            cnt[i] = cnt[i] + (1.0 if match else 0.0)


def divide_where_positive(const float[::1] ssum, const float[::1] cnt, float[::1] out):
    """out = ssum / cnt where cnt > 0, else 0."""
    cdef Py_ssize_t i, n = ssum.shape[0]
    with nogil:
        for i in range(n):
            out[i] = ssum[i] / cnt[i] if cnt[i] > 0.0 else 0.0


def masked_sum_count(const float[::1] x, const uint8_t[::1] mask, float[::1] ssum, float[::1] cnt):
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            ssum[i] = ssum[i] + (x[i] if mask[i] else 0.0)
            cnt[i] = cnt[i] + (1.0 if mask[i] else 0.0)


def consensus_count(const float[::1] tau, const float[::1] tau_mtl, float lam_i, uint8_t[::1] cnt):
    """cnt += 1 where |tau| >= |tau_mtl - tau| * lam_i."""
    cdef Py_ssize_t i, n = tau.shape[0]
    with nogil:
        for i in range(n):
            if fabsf(tau[i]) >= fabsf(tau_mtl[i] - tau[i]) * lam_i:
                cnt[i] = cnt[i] + 1


def add_where_count_ge(const float[::1] base, const float[::1] x, const uint8_t[::1] cnt,
                       int min_count, float[::1] out):
    """out = base + x where cnt >= min_count, else base."""
    cdef Py_ssize_t i, n = base.shape[0]
    with nogil:
        for i in range(n):
            out[i] = base[i] + (x[i] if cnt[i] >= min_count else 0.0)


def fisher_combine(const float[::1] numer, const float[::1] denom, const float[::1] fallback,
                   float eps, float[::1] out):
    """out = (numer + eps*fallback) / (denom + eps)."""
    cdef Py_ssize_t i, n = numer.shape[0]
    with nogil:
        for i in range(n):
            out[i] = (numer[i] + eps * fallback[i]) / (denom[i] + eps)


def dare_accumulate(const float[::1] tau, float[::1] acc, uint64_t key, double p, float inv_keep,
                    float lam):
    """acc += lam * (tau * inv_keep) at positions kept by the counter RNG.

    Element j is dropped iff u01(mix(key + (j+1)*golden)) < p, so the keep
    decision depends only on (key, j) and is independent of scheduling.
    """
    cdef Py_ssize_t i, n = tau.shape[0]
    cdef uint64_t h
    cdef double u
    cdef bint keep
    with nogil:
        for i in range(n):
            h = mix64(key + (<uint64_t> (i + 1)) * GOLDEN)
            u = <double> (h >> 11) * U01_SCALE
            keep = u >= p
            acc[i] = acc[i] + (lam * (tau[i] * inv_keep) if keep else 0.0)

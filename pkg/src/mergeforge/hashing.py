"""Stable 64-bit hashing used for dropout keys and manifest fingerprints.

Python's built-in hash() is salted per process, so everything here is
hand-rolled FNV-1a / splitmix-style mixing that is identical across runs,
platforms, and both kernel backends.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def dare_key(seed: int, task_index: int, param_name: str) -> int:
    """Per-(seed, task, parameter) base key for the counter RNG."""
    k = mix64((seed & _MASK64) ^ _GOLDEN)
    k = mix64(k ^ (((task_index + 1) * _GOLDEN) & _MASK64))
    return mix64(k ^ fnv1a64(param_name.encode("utf-8")))


def manifest_fingerprint(entries) -> str:
    """64-bit hex fingerprint of a checkpoint's (key, shape) manifest.

    entries: iterable of (name, shape) pairs; order-insensitive.
    """
    h = 0xCBF29CE484222325
    for name, shape in sorted((str(k), tuple(s)) for k, s in entries):
        line = f"{name}:{','.join(str(d) for d in shape)};".encode("utf-8")
        for b in line:
            h ^= b
            h = (h * 0x100000001B3) & _MASK64
    return f"{h:016x}"

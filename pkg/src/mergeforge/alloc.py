"""Instrumented accounting of tensor-resident memory.

Every Tensor buffer registers its float32-resident size here on construction
and is released when garbage collected (refcounting frees groups as soon as
the pipeline drops them). The pipeline additionally uses ByteBudget for
admission control so that concurrent workers can never hold more than one
checkpoint-set worth of tensors in flight.
"""

from __future__ import annotations

import threading
import weakref


class AllocationTracker:
    def __init__(self):
        self._lock = threading.Lock()
        self.current_bytes = 0
        self.peak_bytes = 0

    def register(self, nbytes: int) -> None:
        with self._lock:
            self.current_bytes += nbytes
            if self.current_bytes > self.peak_bytes:
                self.peak_bytes = self.current_bytes

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.current_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.current_bytes

    def track(self, obj, nbytes: int) -> None:
        """Register nbytes now and release them when obj is collected."""
        self.register(nbytes)
        weakref.finalize(obj, self.release, nbytes)


#: process-wide tracker; tests reset_peak() around the region they measure.
tracker = AllocationTracker()


class ByteBudget:
    """Byte reservations against a fixed limit.

    The pipeline's producer thread owns both admission and draining, so
    acquisition is non-blocking: on a failed try_acquire the producer drains
    finished work (releasing bytes) and retries. force_acquire admits a
    single group larger than the whole budget once nothing else is in
    flight, degrading to serial processing instead of deadlocking.
    """

    def __init__(self, limit_bytes: int):
        self.limit = limit_bytes
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    def try_acquire(self, nbytes: int) -> bool:
        with self._lock:
            if self._used + nbytes <= self.limit:
                self._used += nbytes
                return True
            return False

    def force_acquire(self, nbytes: int) -> None:
        with self._lock:
            self._used += nbytes

    def release(self, nbytes: int) -> None:
        with self._lock:
            self._used -= nbytes

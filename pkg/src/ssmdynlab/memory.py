"""Instrumented accounting of tensor-buffer bytes.

Training-memory numbers reported by this package (peak_bytes, MMPT) are not
process RSS: they count bytes of buffers explicitly registered with the meter,
which is what makes two identical runs report identical peaks. Buffers are
considered live until garbage collected; CPython's refcounting makes the
release points deterministic for the allocation patterns used here.
"""

from __future__ import annotations

import weakref

import numpy as np


class MemoryMeter:
    """High-water mark of live registered buffer bytes since the last reset."""

    def __init__(self) -> None:
        self._live = 0
        self._peak = 0
        self._seen = set()

    def reset(self) -> None:
        """Restart peak tracking at the current live total."""
        self._peak = self._live

    def track(self, array: np.ndarray) -> np.ndarray:
        """Register a buffer and return it; bytes are released when it dies.

        Registering an already-tracked live buffer is a no-op, so callers
        may re-track long-lived arrays (model weights) freely.
        """
        key = id(array)
        if key in self._seen:
            return array
        self._seen.add(key)
        n = int(array.nbytes)
        self._live += n
        if self._live > self._peak:
            self._peak = self._live
        weakref.finalize(array, self._release, n, key)
        return array

    def _release(self, n: int, key: int) -> None:
        self._live -= n
        self._seen.discard(key)

    @property
    def live_bytes(self) -> int:
        return self._live

    @property
    def peak_bytes(self) -> int:
        return self._peak


_METER = MemoryMeter()


def default_meter() -> MemoryMeter:
    return _METER


def memory_meter() -> int:
    """Peak live tracked bytes since the last ``reset_memory_meter`` call."""
    return _METER.peak_bytes


def reset_memory_meter() -> None:
    _METER.reset()


def tracked(array: np.ndarray) -> np.ndarray:
    """Register an existing array with the default meter."""
    return _METER.track(array)


def tracked_zeros(shape, dtype=np.float64) -> np.ndarray:
    return _METER.track(np.zeros(shape, dtype=dtype))

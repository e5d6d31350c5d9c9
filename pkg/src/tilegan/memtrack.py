"""Byte accounting for tensor data and gradient buffers.

Every :class:`~tilegan.tensor.Tensor` reports its allocation and release
here. The counter is process-wide and guarded by a lock so worker threads can
allocate concurrently; the high-water mark is updated synchronously on each
allocation, which makes peaks exact and reproducible.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager


class MemoryCapExceeded(MemoryError):
    """Raised when an allocation would push live bytes over the configured cap."""

    def __init__(self, requested: int, live: int, cap: int):
        super().__init__(
            f"allocation of {requested} bytes would raise live bytes to "
            f"{live + requested}, above the cap of {cap}"
        )
        self.requested = requested
        self.live = live
        self.cap = cap


class UntrackedAllocation(RuntimeError):
    """Tracked byte count disagrees with the live tensors (hook bypass)."""


class MemTracker:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.total_allocs = 0
        self.total_frees = 0
        self.cap: int | None = None
        self._phase_label: str | None = None
        self._phase_peak = 0
        self.samples: list[tuple[str, int]] = []

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            if self.cap is not None and self.current + nbytes > self.cap:
                raise MemoryCapExceeded(nbytes, self.current, self.cap)
            self.current += nbytes
            self.total_allocs += 1
            if self.current > self.peak:
                self.peak = self.current
            if self.current > self._phase_peak:
                self._phase_peak = self.current

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.current -= nbytes
            self.total_frees += 1
            if self.current < 0:
                raise UntrackedAllocation(f"tracked bytes went negative ({self.current})")

    def reset_peak(self) -> None:
        """Restart high-water tracking from the current live bytes."""
        with self._lock:
            self.peak = self.current
            self._phase_peak = self.current

    @contextmanager
    def phase(self, label: str):
        """Record the high-water mark reached while the block runs as ``(label, bytes)``.

        Phases do not nest; the inner label wins until it exits.
        """
        with self._lock:
            outer = self._phase_label
            outer_peak = self._phase_peak
            self._phase_label = label
            self._phase_peak = self.current
        try:
            yield
        finally:
            with self._lock:
                self.samples.append((label, self._phase_peak))
                self._phase_label = outer
                self._phase_peak = max(outer_peak, self._phase_peak)

    @contextmanager
    def capped(self, cap: int | None):
        with self._lock:
            previous = self.cap
            self.cap = cap
        try:
            yield
        finally:
            with self._lock:
                self.cap = previous


TRACKER = MemTracker()

"""Virtual time primitives.

Virtual time is the host realtime clock plus a non-negative offset:

    virtual = wall + offset

The offset starts at zero and only ever grows.  Every process keeps its own
cached copy of the offset in a :class:`VirtualClock` and merges offset
updates broadcast by the timekeeper.  Because updates carry absolute offsets
rather than increments, applying them is idempotent and tolerant of
reordering: the clock simply keeps the maximum offset it has seen.

All quantities are integer nanoseconds so that arithmetic is exact and
64-bit values survive serialization without floating-point loss.
"""

from __future__ import annotations

import threading
import time

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def wall_now() -> int:
    """Current host realtime clock reading in nanoseconds since the epoch.

    Realtime (not monotonic) so that readings are meaningful across
    processes on the same host.  NTP slew can make consecutive readings
    regress by a small amount; consumers tolerate sub-millisecond noise.
    """
    return time.time_ns()


class VirtualClock:
    """A process-local view of global virtual time.

    Readers call :meth:`virtual_now` without locking; they observe either
    the previous or the new offset, never a torn or decreased value.
    Writers (the broadcast receiver and the registration path) serialize
    through an internal lock because merging is a read-modify-write.
    """

    def __init__(self, offset_ns: int = 0, update_sequence: int = 0) -> None:
        if offset_ns < 0:
            raise ValueError(f"offset must be non-negative, got {offset_ns}")
        self._lock = threading.Lock()
        self.offset_ns = offset_ns
        self.update_sequence = update_sequence

    def virtual_now(self) -> int:
        """Wall clock plus current offset.  Never blocks."""
        return time.time_ns() + self.offset_ns

    def apply_update(self, offset_ns: int, seq: int) -> bool:
        """Merge one clock update.

        Args:
            offset_ns: absolute offset carried by the update.
            seq: the update's sequence number.

        Returns:
            True when the merge grew the offset.  Stale or duplicate
            sequence numbers are ignored without error, and an offset
            smaller than the current one never shrinks the clock.
        """
        with self._lock:
            if seq <= self.update_sequence:
                return False
            self.update_sequence = seq
            if offset_ns > self.offset_ns:
                self.offset_ns = offset_ns
                return True
            return False

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"VirtualClock(offset_ns={self.offset_ns}, seq={self.update_sequence})"

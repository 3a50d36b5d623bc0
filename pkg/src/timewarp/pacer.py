"""Time-advancement backends for the emulated engine and the dispatcher.

Both execution modes move a component to an absolute virtual deadline; only
the mechanism differs:

* ``TimewarpPacer`` wraps a timekeeper client handle and jumps.
* ``SleepPacer`` runs without any timekeeper: the offset stays zero, virtual
  time *is* wall time, and advancing means sleeping until the deadline.

Sleeping is deadline-based (never cumulative-relative) and finishes with a
short spin so that per-step scheduling noise does not accumulate into the
measured latency distributions.
"""

from __future__ import annotations

import threading
import time

from timewarp.client import TimekeeperClient
from timewarp.time_core import wall_now

_SPIN_NS = 1_500_000  # final stretch handled by spinning, ~1.5ms


def sleep_until(deadline_ns: int) -> None:
    """Sleep until the realtime clock reaches ``deadline_ns``."""
    while True:
        remaining = deadline_ns - wall_now()
        if remaining <= 0:
            return
        if remaining > _SPIN_NS:
            time.sleep((remaining - _SPIN_NS) / 1e9)
        else:
            # busy-wait the tail; time.sleep can overshoot by ~1ms
            while wall_now() < deadline_ns:
                pass
            return


class TimewarpPacer:
    """Advance by jumping the shared virtual clock."""

    def __init__(self, client: TimekeeperClient) -> None:
        self.client = client

    def virtual_now(self) -> int:
        return self.client.virtual_now()

    def advance_to(self, target_ns: int) -> None:
        self.client.advance_to(target_ns)

    def group_sync(self, group_id: str, expected: int) -> None:
        generation = self.client.collective_enter(group_id, expected)
        self.client.collective_wait_release(group_id, generation)

    def finish(self) -> None:
        self.client.deregister()


class SleepPacer:
    """Advance by sleeping; virtual time equals wall time.

    ``barriers`` is shared between the workers of one emulated replica so
    that group synchronization maps onto in-process barriers.
    """

    def __init__(self, barriers: "BarrierRegistry | None" = None) -> None:
        self._barriers = barriers if barriers is not None else BarrierRegistry()

    def virtual_now(self) -> int:
        return wall_now()

    def advance_to(self, target_ns: int) -> None:
        sleep_until(target_ns)

    def group_sync(self, group_id: str, expected: int) -> None:
        self._barriers.get(group_id, expected).wait()

    def finish(self) -> None:
        pass


class BarrierRegistry:
    """Lazily-created named threading barriers, shared across SleepPacers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._barriers: dict[str, threading.Barrier] = {}

    def get(self, group_id: str, expected: int) -> threading.Barrier:
        with self._lock:
            barrier = self._barriers.get(group_id)
            if barrier is None:
                barrier = threading.Barrier(expected)
                self._barriers[group_id] = barrier
            elif barrier.parties != expected:
                raise ValueError(
                    f"group {group_id!r} opened for {barrier.parties} parties, got {expected}"
                )
            return barrier

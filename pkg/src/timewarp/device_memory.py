"""Split-state emulated device memory.

The emulated device distinguishes two classes of allocation by size:

* METADATA - small buffers (below the threshold, 4 MiB by default) that the
  host logic actually reads back: batch descriptors, block tables, sampling
  state.  These get real backing bytes and faithful read/write semantics.
* COMPUTE - large buffers (at or above the threshold) that only a real
  accelerator would consume: weights, KV cache, activations.  They occupy
  emulated capacity but carry no backing storage.  Writes are accepted and
  discarded; reads abort with :class:`PhantomRead`, because any value we
  could return would silently poison the caller.

Capacity accounting is exact: every allocation debits its full size until
freed, regardless of class, so out-of-memory behavior matches a device with
that much physical memory.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

DEFAULT_METADATA_THRESHOLD = 4 * 1024 * 1024  # 4 MiB


class DeviceMemoryError(Exception):
    pass


class OutOfDeviceMemory(DeviceMemoryError):
    """Allocation would exceed the emulated device capacity."""


class OutOfBounds(DeviceMemoryError):
    """Read or write touches bytes outside the allocation."""


class UseAfterFree(DeviceMemoryError):
    """Operation on a handle that was already freed."""


class PhantomRead(DeviceMemoryError):
    """Read from a COMPUTE allocation, which has no real contents.

    This is deliberately fatal: the emulation cannot know what the real
    kernel would have produced, so continuing would corrupt the run.
    """


class BufferClass(enum.Enum):
    METADATA = "METADATA"
    COMPUTE = "COMPUTE"


@dataclass
class BufferHandle:
    """Opaque ticket for one device allocation."""

    buffer_id: int
    size: int
    buffer_class: BufferClass
    label: str = ""
    freed: bool = field(default=False, compare=False)

    def __str__(self) -> str:
        tag = f" {self.label!r}" if self.label else ""
        return f"<buffer {self.buffer_id}{tag} {self.buffer_class.value} {self.size}B>"


class DeviceAllocator:
    """Allocator for one emulated device.

    Operations are serialized by the owning worker; the allocator itself is
    not thread-safe.
    """

    def __init__(
        self,
        capacity_bytes: int,
        metadata_threshold_bytes: int = DEFAULT_METADATA_THRESHOLD,
    ) -> None:
        if capacity_bytes <= 0:
            raise ValueError(f"capacity must be positive, got {capacity_bytes}")
        if metadata_threshold_bytes <= 0:
            raise ValueError(f"threshold must be positive, got {metadata_threshold_bytes}")
        self.capacity_bytes = capacity_bytes
        self.metadata_threshold_bytes = metadata_threshold_bytes
        self.allocated_bytes = 0
        self._ids = itertools.count(1)
        self._live: dict[int, BufferHandle] = {}
        self._backing: dict[int, bytearray] = {}

    def alloc(self, size: int, label: str = "") -> BufferHandle:
        """Allocate ``size`` bytes.

        Class is METADATA when ``size`` is strictly below the threshold,
        COMPUTE at or above it.
        """
        if size <= 0:
            raise ValueError(f"allocation size must be positive, got {size}")
        if self.allocated_bytes + size > self.capacity_bytes:
            raise OutOfDeviceMemory(
                f"requested {size}B with {self.capacity_bytes - self.allocated_bytes}B free "
                f"of {self.capacity_bytes}B"
            )
        cls = (
            BufferClass.METADATA
            if size < self.metadata_threshold_bytes
            else BufferClass.COMPUTE
        )
        handle = BufferHandle(next(self._ids), size, cls, label)
        self._live[handle.buffer_id] = handle
        if cls is BufferClass.METADATA:
            self._backing[handle.buffer_id] = bytearray(size)
        self.allocated_bytes += size
        return handle

    def free(self, handle: BufferHandle) -> None:
        live = self._check_live(handle)
        live.freed = True
        handle.freed = True
        del self._live[handle.buffer_id]
        self._backing.pop(handle.buffer_id, None)
        self.allocated_bytes -= handle.size

    def write(self, handle: BufferHandle, offset: int, data: bytes) -> None:
        """Write ``data`` at ``offset``.

        METADATA buffers store the bytes; COMPUTE buffers validate bounds and
        discard the payload, which is exactly what the host-visible effect of
        a device-side write is.
        """
        live = self._check_live(handle)
        self._check_bounds(live, offset, len(data))
        if live.buffer_class is BufferClass.METADATA:
            backing = self._backing[live.buffer_id]
            backing[offset : offset + len(data)] = data

    def read(self, handle: BufferHandle, offset: int, length: int) -> bytes:
        live = self._check_live(handle)
        self._check_bounds(live, offset, length)
        if live.buffer_class is BufferClass.COMPUTE:
            raise PhantomRead(
                f"read of {length}B at +{offset} from {live}: COMPUTE allocations "
                "have no contents in emulation"
            )
        backing = self._backing[live.buffer_id]
        return bytes(backing[offset : offset + length])

    def live_handles(self) -> list[BufferHandle]:
        return list(self._live.values())

    def _check_live(self, handle: BufferHandle) -> BufferHandle:
        live = self._live.get(handle.buffer_id)
        if live is None or handle.freed:
            raise UseAfterFree(f"{handle} is not live")
        return live

    @staticmethod
    def _check_bounds(handle: BufferHandle, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > handle.size:
            raise OutOfBounds(
                f"access [{offset}, {offset + length}) outside {handle.size}B allocation"
            )

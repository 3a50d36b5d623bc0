"""Time-warp emulation stack.

Emulates GPU execution time for LLM serving benchmarks by replacing real
compute with predicted durations and skipping over them in a shared virtual
clock, coordinated by a central timekeeper service.
"""

from timewarp.time_core import VirtualClock, wall_now

__version__ = "0.1.0"

__all__ = ["VirtualClock", "wall_now", "__version__"]

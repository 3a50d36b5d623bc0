"""Sleep-mode pacing and in-process group synchronization."""

import threading

import pytest

from timewarp.pacer import BarrierRegistry, SleepPacer, sleep_until
from timewarp.time_core import wall_now

MS = 1_000_000


def test_sleep_until_is_precise():
    deadline = wall_now() + 20 * MS
    sleep_until(deadline)
    overshoot = wall_now() - deadline
    assert overshoot >= 0
    # the spin tail keeps the overshoot far below time.sleep jitter
    assert overshoot < 2 * MS


def test_sleep_until_past_deadline_returns_now():
    before = wall_now()
    sleep_until(before - 50 * MS)
    assert wall_now() - before < 5 * MS


def test_sleep_pacer_tracks_wall():
    pacer = SleepPacer()
    target = pacer.virtual_now() + 10 * MS
    pacer.advance_to(target)
    assert pacer.virtual_now() >= target


def test_barrier_registry_reuses_by_name():
    reg = BarrierRegistry()
    assert reg.get("tp.s0", 2) is reg.get("tp.s0", 2)
    assert reg.get("tp.s0", 2) is not reg.get("tp.s1", 2)


def test_barrier_registry_rejects_party_mismatch():
    reg = BarrierRegistry()
    reg.get("tp.s0", 2)
    with pytest.raises(ValueError, match="parties"):
        reg.get("tp.s0", 3)


def test_group_sync_joins_threads():
    registry = BarrierRegistry()
    pacers = [SleepPacer(registry) for _ in range(3)]
    arrived = []
    lock = threading.Lock()

    def worker(p, name):
        p.group_sync("allreduce", 3)
        with lock:
            arrived.append(name)

    threads = [
        threading.Thread(target=worker, args=(p, i)) for i, p in enumerate(pacers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=5)
    assert sorted(arrived) == [0, 1, 2]


def test_group_sync_cycles():
    # a threading.Barrier resets after release; repeated step boundaries reuse it
    registry = BarrierRegistry()
    a, b = SleepPacer(registry), SleepPacer(registry)
    rounds = 5
    counts = []

    def left():
        for _ in range(rounds):
            a.group_sync("hop.t0.s1", 2)

    t = threading.Thread(target=left)
    t.start()
    for i in range(rounds):
        b.group_sync("hop.t0.s1", 2)
        counts.append(i)
    t.join(timeout=5)
    assert counts == list(range(rounds))
    assert not t.is_alive()

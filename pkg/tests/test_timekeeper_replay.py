"""Timekeeper log replay: reproduction of live state and tamper detection."""

import json

import pytest

from timewarp.replay import ReplayMismatch, load_log, replay_and_verify, replay_records
from timewarp.wire import MessageType

from _support import CoreHarness, run_random_schedule

MS = 1_000_000
WALL0 = 1_000_000_000


def scripted_harness() -> CoreHarness:
    """Three rounds and one collective, long enough to tamper with."""
    h = CoreHarness.build()
    a = h.register_actor()
    b = h.register_actor()
    h.seal()
    h.jump(a, WALL0 + 10 * MS)
    h.jump(b, WALL0 + 12 * MS)
    h.jump(a, WALL0 + 30 * MS)
    h.jump(b, WALL0 + 25 * MS)
    h.enter(a, "g", expected=2)
    h.enter(b, "g", expected=2)
    h.jump(a, WALL0 + 50 * MS)
    h.jump(b, WALL0 + 50 * MS)
    h.deregister(a)
    h.deregister(b)
    return h


def live_broadcast_sequence(h: CoreHarness):
    return [(m.offset, m.seq) for m in h.broadcasts if m.type is MessageType.CLOCK_UPDATE]


def tampered(records: list[dict]):
    return json.loads(json.dumps(records))


def test_replay_matches_scripted_run():
    h = scripted_harness()
    report = replay_records(h.records)
    assert report.broadcast_sequence == live_broadcast_sequence(h)
    assert report.final_offset_ns == h.core.offset_ns
    assert report.final_seq == h.core.seq
    assert report.rounds == 3
    assert report.broadcasts == 3
    assert report.releases == 1
    assert report.max_overshoot_ns == 0
    assert report.records == len(h.records)


@pytest.mark.parametrize("seed", range(30))
def test_replay_matches_randomized_schedules(seed):
    h = run_random_schedule(seed)
    report = replay_records(h.records)
    assert report.broadcast_sequence == live_broadcast_sequence(h)
    assert report.final_offset_ns == h.core.offset_ns
    assert report.final_seq == h.core.seq
    assert report.max_overshoot_ns == 0


def test_replay_from_log_file(tmp_path):
    h = scripted_harness()
    path = tmp_path / "timekeeper.jsonl"
    with open(path, "w") as fh:
        for rec in h.records:
            fh.write(json.dumps(rec) + "\n")
    assert load_log(str(path)) == h.records
    report = replay_and_verify(str(path))
    assert report.broadcast_sequence == live_broadcast_sequence(h)


def find(records, event, nth=0):
    hits = [i for i, r in enumerate(records) if r["event"] == event]
    return hits[nth]


def test_replay_rejects_corrupted_offset():
    records = tampered(scripted_harness().records)
    records[find(records, "broadcast", 1)]["offset_ns"] += 1
    with pytest.raises(ReplayMismatch, match="offset"):
        replay_records(records)


def test_replay_rejects_skipped_seq():
    records = tampered(scripted_harness().records)
    records[find(records, "broadcast", 2)]["seq"] = 99
    with pytest.raises(ReplayMismatch, match="seq"):
        replay_records(records)


def test_replay_rejects_offset_regression():
    records = tampered(scripted_harness().records)
    first = records[find(records, "broadcast", 0)]
    second = records[find(records, "broadcast", 1)]
    second["offset_ns"] = first["offset_ns"] - 1
    with pytest.raises(ReplayMismatch):
        replay_records(records)


def test_replay_rejects_missing_request():
    records = tampered(scripted_harness().records)
    del records[find(records, "request", 0)]
    with pytest.raises(ReplayMismatch):
        replay_records(records)


def test_replay_rejects_forged_t_min():
    records = tampered(scripted_harness().records)
    records[find(records, "resolve", 0)]["t_min_ns"] += 5 * MS
    with pytest.raises(ReplayMismatch):
        replay_records(records)


def test_replay_rejects_dropped_final_broadcast():
    records = tampered(scripted_harness().records)
    del records[find(records, "broadcast", 2)]
    with pytest.raises(ReplayMismatch):
        replay_records(records)


def test_replay_rejects_premature_round():
    # a resolve while one actor's request is missing: pending != eligible
    records = tampered(scripted_harness().records)
    del records[find(records, "request", 0)]
    del records[find(records, "request", 0)]  # both asks of round 1
    with pytest.raises(ReplayMismatch):
        replay_records(records)


def test_suppressed_run_replays_with_counts():
    h = CoreHarness.build(suppress=True)
    a = h.register_actor()
    h.seal()
    h.jump(a, WALL0 + 5 * MS)
    h.jump(a, WALL0 + 9 * MS)
    report = replay_records(h.records)
    assert report.broadcasts == 2
    assert report.suppressed == 2
    assert report.final_offset_ns == h.core.offset_ns

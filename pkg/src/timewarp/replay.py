"""Offline re-execution of a timekeeper structured log.

The timekeeper's state thread serializes every protocol decision, so its
log is a total order of inputs (register / seal / request / collective /
deregister) and outputs (resolve / broadcast / collective_release).  This
module replays the inputs through a shadow state machine and checks that
every logged output is exactly what the barrier rules dictate:

* a round resolves only when every eligible actor has a pending target;
* the logged t_min is the minimum of the logged pending targets;
* each broadcast applies offset' = max(offset, t_min - wall) and bumps
  the sequence number by exactly one;
* whenever the offset grew, wall + offset' lands exactly on t_min - the
  clock advances to the nearest requested target and not a nanosecond
  further;
* collective releases fire exactly when the group fills, with the right
  generation and membership.

Replay trusts the logged wall-clock stamps (it audits decisions, not the
host clock) and is independent of sockets, threads, and sleeps.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


class ReplayMismatch(Exception):
    """The log disagrees with the barrier rules."""

    def __init__(self, index: int, record: dict, detail: str) -> None:
        super().__init__(f"record {index}: {detail} | {json.dumps(record)}")
        self.index = index
        self.record = record


@dataclass
class ReplayReport:
    records: int = 0
    rounds: int = 0
    broadcasts: int = 0
    suppressed: int = 0
    releases: int = 0
    max_overshoot_ns: int = 0  # max of wall+offset'-t_min at offset-raising broadcasts
    final_offset_ns: int = 0
    final_seq: int = 0
    broadcast_sequence: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class _ShadowGroup:
    generation: int = 0
    expected: int | None = None
    arrived: set[str] = field(default_factory=set)


class _Shadow:
    def __init__(self) -> None:
        self.offset = 0
        self.seq = 0
        self.sealed = False
        self.actors: dict[str, bool] = {}  # id -> active
        self.observers: dict[str, bool] = {}
        self.pending: dict[str, int] = {}
        self.exempt: set[str] = set()
        self.groups: dict[str, _ShadowGroup] = {}

    def eligible(self) -> int:
        live = [a for a, active in self.actors.items() if active]
        return len(live) - sum(1 for a in live if a in self.exempt)

    def round_complete(self) -> bool:
        e = self.eligible()
        return self.sealed and e > 0 and len(self.pending) == e


def load_log(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def replay_records(records: list[dict]) -> ReplayReport:
    shadow = _Shadow()
    report = ReplayReport(records=len(records))
    expect_broadcast_for: dict | None = None  # pending resolve awaiting its broadcast record

    def fail(i: int, rec: dict, detail: str) -> None:
        raise ReplayMismatch(i, rec, detail)

    for i, rec in enumerate(records):
        event = rec.get("event")
        if expect_broadcast_for is not None and event != "broadcast":
            fail(i, rec, "resolve promised a broadcast but none followed")

        if event in ("start", "stall", "shutdown", "seal"):
            if event == "seal":
                shadow.sealed = True
                live = [a for a, active in shadow.actors.items() if active]
                if rec["num_actors"] != len(live):
                    fail(i, rec, f"seal says {rec['num_actors']} actors, shadow has {len(live)}")
            continue

        if event == "register":
            table = shadow.actors if rec["role"] == "ACTOR" else shadow.observers
            table[rec["client_id"]] = True
            if rec["offset_ns"] != shadow.offset or rec["seq"] != shadow.seq:
                fail(i, rec, f"register snapshot != shadow ({shadow.offset}, {shadow.seq})")
            continue

        if event == "request":
            cid = rec["client_id"]
            if not shadow.actors.get(cid, False):
                fail(i, rec, f"jump request from non-actor {cid}")
            shadow.pending[cid] = rec["target_ns"]
            shadow.exempt.discard(cid)
            continue

        if event == "collective_enter":
            cid = rec["client_id"]
            group = shadow.groups.setdefault(rec["group_id"], _ShadowGroup())
            if group.generation != rec["generation"]:
                fail(i, rec, f"generation {rec['generation']} != shadow {group.generation}")
            if not group.arrived:
                group.expected = rec["expected"]
            elif group.expected != rec["expected"]:
                fail(i, rec, "expected mismatch accepted by server")
            group.arrived.add(cid)
            shadow.exempt.add(cid)
            shadow.pending.pop(cid, None)
            continue

        if event == "collective_release":
            group = shadow.groups.get(rec["group_id"])
            if group is None:
                fail(i, rec, "release for unknown group")
            if len(group.arrived) != group.expected:
                fail(i, rec, f"release with {len(group.arrived)}/{group.expected} arrived")
            if sorted(group.arrived) != rec["members"]:
                fail(i, rec, "release membership mismatch")
            if group.generation != rec["generation"]:
                fail(i, rec, "release generation mismatch")
            for member in group.arrived:
                shadow.exempt.discard(member)
            group.arrived.clear()
            group.expected = None
            group.generation += 1
            report.releases += 1
            continue

        if event == "deregister":
            cid = rec["client_id"]
            if cid in shadow.actors:
                shadow.actors[cid] = False
            elif cid in shadow.observers:
                shadow.observers[cid] = False
            else:
                fail(i, rec, f"deregister of unknown client {cid}")
            shadow.pending.pop(cid, None)
            shadow.exempt.discard(cid)
            for group in shadow.groups.values():
                group.arrived.discard(cid)
            continue

        if event == "resolve":
            if not shadow.round_complete():
                fail(
                    i,
                    rec,
                    f"resolve but shadow round incomplete: pending={len(shadow.pending)}, "
                    f"eligible={shadow.eligible()}, sealed={shadow.sealed}",
                )
            if rec["pending"] != {k: v for k, v in sorted(shadow.pending.items())}:
                fail(i, rec, f"pending snapshot != shadow {shadow.pending}")
            if rec["eligible"] != shadow.eligible():
                fail(i, rec, f"eligible {rec['eligible']} != shadow {shadow.eligible()}")
            t_min = min(shadow.pending.values())
            if rec["t_min_ns"] != t_min:
                fail(i, rec, f"t_min {rec['t_min_ns']} != shadow {t_min}")
            should_broadcast = rec["wall_ns"] < t_min
            if rec["broadcast"] != should_broadcast:
                fail(i, rec, f"broadcast flag should be {should_broadcast}")
            report.rounds += 1
            if should_broadcast:
                expect_broadcast_for = rec
            else:
                shadow.pending.clear()
            continue

        if event == "broadcast":
            if expect_broadcast_for is None:
                fail(i, rec, "broadcast without a preceding resolve")
            resolve = expect_broadcast_for
            expect_broadcast_for = None
            t_min = resolve["t_min_ns"]
            wall = resolve["wall_ns"]
            expected_offset = max(shadow.offset, t_min - wall)
            if rec["offset_ns"] != expected_offset:
                fail(
                    i,
                    rec,
                    f"offset {rec['offset_ns']} != max({shadow.offset}, {t_min} - {wall}) "
                    f"= {expected_offset}",
                )
            if rec["seq"] != shadow.seq + 1:
                fail(i, rec, f"seq {rec['seq']} != {shadow.seq + 1}")
            if rec["offset_ns"] < shadow.offset:
                fail(i, rec, "offset regressed")
            if rec["offset_ns"] > shadow.offset:
                overshoot = wall + rec["offset_ns"] - t_min
                report.max_overshoot_ns = max(report.max_overshoot_ns, overshoot)
                if overshoot != 0:
                    fail(i, rec, f"offset overshoots nearest target by {overshoot}ns")
            shadow.offset = rec["offset_ns"]
            shadow.seq = rec["seq"]
            shadow.pending.clear()
            report.broadcasts += 1
            if rec.get("suppressed"):
                report.suppressed += 1
            report.broadcast_sequence.append((shadow.offset, shadow.seq))
            continue

        fail(i, rec, f"unknown event {event!r}")

    if expect_broadcast_for is not None:
        raise ReplayMismatch(
            len(records), expect_broadcast_for, "log ended while a broadcast was still owed"
        )
    report.final_offset_ns = shadow.offset
    report.final_seq = shadow.seq
    return report


def replay_and_verify(path: str) -> ReplayReport:
    """Load a timekeeper log and audit it end to end."""
    return replay_records(load_log(path))

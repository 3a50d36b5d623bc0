"""Single-threaded discrete-event reference for the emulated engine.

Computes, without threads, sockets, or any clock, the exact token-event
timeline the emulated engine should produce for a given workload, engine
configuration, and predictor.  The live stack and this module implement
the same scheduling semantics through deliberately different structures
(threads racing over a barrier there, one ordered event loop here), so a
disagreement between them points at a real defect rather than a shared one.

Used by tests and by ``bench oracle`` to validate live runs.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

from timewarp.engine import EngineConfig, SchedulingPolicy
from timewarp.predictor import BatchComposition, DecodeSlot, PrefillChunk
from timewarp.workload import Arrival

log = logging.getLogger(__name__)


class OracleStalled(Exception):
    """The simulated engine can never make progress again."""


@dataclass
class _Sim:
    rid: str
    prompt: int
    output: int
    done_prefill: int = 0
    emitted: int = 0  # output tokens produced so far


def _blocks(tokens: int, bk: int) -> int:
    return (tokens + bk - 1) // bk if tokens > 0 else 0


def _held(s: _Sim, bk: int) -> int:
    # usage counts prefilled context plus every sampled token, floored at
    # the full-prompt reservation taken at admission
    return max(_blocks(s.prompt, bk), _blocks(s.done_prefill + s.emitted, bk))


def simulate(
    arrivals: list[Arrival],
    cfg: EngineConfig,
    predictor,
    epoch_ns: int = 0,
) -> list[dict]:
    """Play the workload through the reference event loop.

    Returns token events as dicts with the same schema the live engine
    logs: request_id, kind, virtual_ts_ns, step.
    """
    future = deque(sorted(arrivals, key=lambda a: a.offset_ns))
    waiting: deque[_Sim] = deque()
    active: list[_Sim] = []
    now = epoch_ns
    step = 0
    events: list[dict] = []

    def emit(sim: _Sim, kind: str) -> None:
        events.append(
            {"request_id": sim.rid, "kind": kind, "virtual_ts_ns": now, "step": step}
        )

    while future or waiting or active:
        while future and epoch_ns + future[0].offset_ns <= now:
            a = future.popleft()
            waiting.append(_Sim(a.request_id, a.prompt_tokens, a.output_tokens))

        batch, admitted = _plan(waiting, active, cfg)
        if batch.is_empty():
            if active or waiting:
                _diagnose_stall(waiting, active, cfg)
            # idle until the next arrival
            now = epoch_ns + future[0].offset_ns
            continue

        step += 1
        now += predictor.predict(batch)

        for rid in admitted:
            sim = next(s for s in waiting if s.rid == rid)
            waiting.remove(sim)
            active.append(sim)

        by_id = {s.rid: s for s in active}
        finished: list[_Sim] = []
        for chunk in batch.prefill_chunks:
            sim = by_id[chunk.request_id]
            sim.done_prefill += chunk.chunk_tokens
            if sim.done_prefill >= sim.prompt:
                sim.emitted = 1
                emit(sim, "FIRST_TOKEN")
                if sim.emitted >= sim.output:
                    emit(sim, "FINISHED")
                    finished.append(sim)
        for slot in batch.decodes:
            sim = by_id[slot.request_id]
            sim.emitted += 1
            emit(sim, "OUTPUT_TOKEN")
            if sim.emitted >= sim.output:
                emit(sim, "FINISHED")
                finished.append(sim)
        for sim in finished:
            active.remove(sim)

    return events


def _plan(
    waiting: deque[_Sim], active: list[_Sim], cfg: EngineConfig
) -> tuple[BatchComposition, list[str]]:
    """The oracle's own batch former; mirrors the engine's contract."""
    bk = cfg.kv_block_tokens
    free = cfg.kv_capacity_blocks - sum(_held(s, bk) for s in active)
    budget = cfg.max_batch_tokens
    decodes: list[DecodeSlot] = []
    chunks: list[PrefillChunk] = []
    admitted: list[str] = []

    def pick_decodes() -> None:
        nonlocal budget
        # admission is the only capacity gate: an in-flight decode is never
        # held back by the pool, matching the no-preemption contract
        for s in active:
            if budget <= 0:
                return
            if s.done_prefill < s.prompt or s.emitted >= s.output:
                continue
            decodes.append(DecodeSlot(s.rid, context_len=s.prompt + s.emitted))
            budget -= 1

    def pick_chunks() -> None:
        nonlocal budget, free
        for s in active:
            if budget <= 0:
                return
            remaining = s.prompt - s.done_prefill
            if remaining <= 0:
                continue
            take = min(cfg.chunk_size, remaining, budget)
            chunks.append(PrefillChunk(s.rid, take, context_len_before=s.done_prefill))
            budget -= take
        slots = cfg.max_running - len(active) - len(admitted)
        for s in waiting:
            if budget <= 0 or slots <= 0:
                return
            need = _blocks(s.prompt, bk)
            if need > free:
                return  # strict FCFS: nothing behind the head may jump it
            take = min(cfg.chunk_size, s.prompt, budget)
            admitted.append(s.rid)
            chunks.append(PrefillChunk(s.rid, take, context_len_before=0))
            free -= need
            budget -= take
            slots -= 1

    if cfg.policy is SchedulingPolicy.MIXED:
        pick_decodes()
        pick_chunks()
    else:
        have_prefill = any(s.done_prefill < s.prompt for s in active)
        if not have_prefill and waiting:
            head = waiting[0]
            have_prefill = (
                len(active) < cfg.max_running and _blocks(head.prompt, bk) <= free
            )
        if have_prefill:
            pick_chunks()
        else:
            pick_decodes()

    return BatchComposition(tuple(chunks), tuple(decodes)), admitted


def _diagnose_stall(waiting: deque[_Sim], active: list[_Sim], cfg: EngineConfig) -> None:
    if active:
        raise OracleStalled(
            f"{len(active)} active and {len(waiting)} waiting requests with no "
            "schedulable work: KV pool cannot cover the in-flight set"
        )
    head = waiting[0]
    raise OracleStalled(
        f"request {head.rid} needs {_blocks(head.prompt, cfg.kv_block_tokens)} "
        f"KV blocks; pool holds {cfg.kv_capacity_blocks}"
    )

"""Emulated LLM serving engine.

Reproduces the scheduling behavior of a continuous-batching engine with
chunked prefill, but replaces kernel execution with predicted durations:
each step forms a batch, asks the runtime predictor how long the real
device would take, and advances virtual time over that window (by time
jump or by sleeping, depending on the mode).

State machine per request: QUEUED -> RUNNING -> FINISHED.  Admission
requires KV blocks for the full prompt; there is no preemption.  Per step,
the engine emits FIRST_TOKEN when a request's prefill completes, one
OUTPUT_TOKEN per decode, and FINISHED when the planned output length is
reached, all timestamped with virtual time at the end of the step window.
"""

from __future__ import annotations

import enum
import json
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from timewarp import wire
from timewarp.client import TimekeeperClient
from timewarp.device_memory import DeviceAllocator
from timewarp.pacer import BarrierRegistry, SleepPacer, TimewarpPacer
from timewarp.predictor import BatchComposition, DecodeSlot, PrefillChunk
from timewarp.time_core import NS_PER_MS
from timewarp.wire import Role

log = logging.getLogger(__name__)


class EngineError(Exception):
    pass


class EngineStalled(EngineError):
    """No schedulable work and no event that could ever unblock it."""


class SchedulingPolicy(enum.Enum):
    MIXED = "mixed"
    PREFILL_PRIORITIZED = "prefill_prioritized"


class RequestPhase(enum.Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"


class EventKind(enum.Enum):
    FIRST_TOKEN = "FIRST_TOKEN"
    OUTPUT_TOKEN = "OUTPUT_TOKEN"
    FINISHED = "FINISHED"


@dataclass
class TokenEvent:
    request_id: str
    kind: EventKind
    virtual_ts_ns: int
    step: int = 0

    def to_doc(self) -> dict:
        return {
            "request_id": self.request_id,
            "kind": self.kind.value,
            "virtual_ts_ns": self.virtual_ts_ns,
            "step": self.step,
        }


@dataclass
class EngineRequest:
    request_id: str
    arrival_virtual_ns: int
    prompt_tokens: int
    output_tokens: int
    prefill_progress: int = 0
    decoded: int = 0
    phase: RequestPhase = RequestPhase.QUEUED

    @property
    def prefill_done(self) -> bool:
        return self.prefill_progress >= self.prompt_tokens

    @property
    def wants_decode(self) -> bool:
        return self.prefill_done and self.decoded < self.output_tokens


@dataclass(frozen=True)
class EngineConfig:
    chunk_size: int = 512
    policy: SchedulingPolicy = SchedulingPolicy.MIXED
    max_batch_tokens: int = 512
    max_running: int = 256
    kv_block_tokens: int = 16
    kv_capacity_blocks: int = 4096
    workers_per_replica: int = 1
    pp_stages: int = 1

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.max_batch_tokens < self.chunk_size:
            raise ValueError(
                f"max_batch_tokens ({self.max_batch_tokens}) must be >= "
                f"chunk_size ({self.chunk_size})"
            )
        if self.kv_block_tokens < 1 or self.kv_capacity_blocks < 1:
            raise ValueError("KV geometry must be positive")
        if self.workers_per_replica < 1 or self.pp_stages < 1:
            raise ValueError("worker grid dimensions must be >= 1")

    @classmethod
    def from_doc(cls, doc: dict) -> "EngineConfig":
        return cls(
            chunk_size=int(doc.get("chunk_size", 512)),
            policy=SchedulingPolicy(doc.get("policy", "mixed")),
            max_batch_tokens=int(doc.get("max_batch_tokens", 512)),
            max_running=int(doc.get("max_running", 256)),
            kv_block_tokens=int(doc.get("kv_block_tokens", 16)),
            kv_capacity_blocks=int(doc.get("kv_capacity_blocks", 4096)),
            workers_per_replica=int(doc.get("workers_per_replica", 1)),
            pp_stages=int(doc.get("pp_stages", 1)),
        )


@dataclass
class BatchPlan:
    composition: BatchComposition
    kv_blocks_needed: int = 0
    admitted: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return self.composition.is_empty()


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _used_blocks(req: EngineRequest, block_tokens: int) -> int:
    tokens = req.prefill_progress + req.decoded
    return _ceil_div(tokens, block_tokens) if tokens else 0


def _held_blocks(req: EngineRequest, block_tokens: int) -> int:
    """Blocks a live request pins: usage, floored at its full-prompt reservation."""
    return max(_used_blocks(req, block_tokens), _ceil_div(req.prompt_tokens, block_tokens))


def _chunk_growth(req: EngineRequest, tokens: int, bk: int) -> int:
    """New KV blocks a prefill chunk consumes, including the first generated
    token's slot when the chunk completes the prompt."""
    after = req.prefill_progress + tokens
    if after >= req.prompt_tokens:
        after += 1  # prefill completion samples the first output token
    return _ceil_div(after, bk) - _ceil_div(req.prefill_progress, bk)


def form_batch(
    queued: list[EngineRequest],
    running: list[EngineRequest],
    cfg: EngineConfig,
    admit_horizon_ns: int | None = None,
) -> BatchPlan:
    """Form the next step's batch.  Pure: inspects state, mutates nothing.

    MIXED packs all running decodes first (one token each), then prefill
    chunks (at most one chunk per request, each bounded by ``chunk_size``)
    from running-then-queued prefills, until the token budget is spent.
    PREFILL_PRIORITIZED schedules only prefill chunks whenever any prefill
    work is actionable, starving decodes.  Admission from the queue is FCFS
    with head-of-line blocking and requires free KV blocks for the entire
    prompt; running requests are never capacity-gated (no preemption).

    ``admit_horizon_ns`` bounds admission to requests that arrived at or
    before the step's start: anything stamped later belongs to a later
    step even if its submission is already visible.
    """
    budget = cfg.max_batch_tokens
    bk = cfg.kv_block_tokens
    free = cfg.kv_capacity_blocks - sum(_held_blocks(r, bk) for r in running)
    new_blocks = 0
    decodes: list[DecodeSlot] = []
    chunks: list[PrefillChunk] = []
    admitted: list[str] = []

    def decode_phase() -> None:
        nonlocal budget, new_blocks
        for r in running:
            if budget <= 0:
                break
            if not r.wants_decode:
                continue
            decodes.append(DecodeSlot(r.request_id, context_len=r.prompt_tokens + r.decoded))
            new_blocks += _ceil_div(r.prompt_tokens + r.decoded + 1, bk) - _ceil_div(
                r.prompt_tokens + r.decoded, bk
            )
            budget -= 1

    def prefill_phase() -> None:
        nonlocal budget, free, new_blocks
        for r in running:
            if budget <= 0:
                return
            if r.prefill_done:
                continue
            tokens = min(cfg.chunk_size, r.prompt_tokens - r.prefill_progress, budget)
            chunks.append(PrefillChunk(r.request_id, tokens, context_len_before=r.prefill_progress))
            new_blocks += _chunk_growth(r, tokens, bk)
            budget -= tokens
        for r in queued:
            if budget <= 0:
                return
            if admit_horizon_ns is not None and r.arrival_virtual_ns > admit_horizon_ns:
                return  # arrived after this step started
            if len(running) + len(admitted) >= cfg.max_running:
                return
            reservation = _ceil_div(r.prompt_tokens, bk)
            if reservation > free:
                return  # FCFS: the head blocks the rest, no reordering
            tokens = min(cfg.chunk_size, r.prompt_tokens, budget)
            admitted.append(r.request_id)
            chunks.append(PrefillChunk(r.request_id, tokens, context_len_before=0))
            new_blocks += _chunk_growth(r, tokens, bk)
            free -= reservation
            budget -= tokens

    if cfg.policy is SchedulingPolicy.MIXED:
        decode_phase()
        prefill_phase()
    else:  # PREFILL_PRIORITIZED
        running_prefill = any(not r.prefill_done for r in running)
        head_admissible = bool(queued) and (
            (admit_horizon_ns is None or queued[0].arrival_virtual_ns <= admit_horizon_ns)
            and len(running) < cfg.max_running
            and _ceil_div(queued[0].prompt_tokens, bk) <= free
        )
        if running_prefill or head_admissible:
            prefill_phase()
        else:
            decode_phase()

    return BatchPlan(
        composition=BatchComposition(tuple(chunks), tuple(decodes)),
        kv_blocks_needed=new_blocks,
        admitted=tuple(admitted),
    )


class Scheduler:
    """Owns request state and KV accounting for one replica."""

    def __init__(self, cfg: EngineConfig) -> None:
        self.cfg = cfg
        self.queued: list[EngineRequest] = []
        self.running: list[EngineRequest] = []
        self.finished: list[EngineRequest] = []
        self.used_blocks = 0
        self.steps = 0

    def submit(self, req: EngineRequest) -> None:
        self.queued.append(req)

    def has_work(self) -> bool:
        return bool(self.queued or self.running)

    def earliest_queued_stamp(self) -> int | None:
        if not self.queued:
            return None
        return min(r.arrival_virtual_ns for r in self.queued)

    def next_plan(self, admit_horizon_ns: int | None = None) -> BatchPlan:
        return form_batch(self.queued, self.running, self.cfg, admit_horizon_ns)

    def check_stalled(self, plan: BatchPlan, admit_horizon_ns: int | None = None) -> None:
        """An empty plan with live work means nothing can ever unblock it.

        Running requests are always schedulable, so an empty plan with a
        non-empty queue means the head's full-prompt reservation can never
        fit: admission is FCFS with no preemption, and nothing upstream
        will shrink the requirement.  A head stamped beyond the admission
        horizon is future work rather than a stall; callers re-anchor on it.
        """
        if not plan.is_empty():
            return
        if self.running:
            raise EngineError("empty plan with running requests; scheduler bug")
        if self.queued:
            head = self.queued[0]
            if admit_horizon_ns is not None and head.arrival_virtual_ns > admit_horizon_ns:
                return  # not yet due; the loop re-anchors at its stamp
            raise EngineStalled(
                f"request {head.request_id} needs "
                f"{_ceil_div(head.prompt_tokens, self.cfg.kv_block_tokens)} KV blocks "
                f"for its prompt but the pool only has {self.cfg.kv_capacity_blocks}"
            )

    def apply(self, plan: BatchPlan, step_end_virtual_ns: int) -> list[TokenEvent]:
        """Commit a step's effects and emit its token events."""
        self.steps += 1
        by_id = {r.request_id: r for r in self.queued + self.running}
        events: list[TokenEvent] = []

        for rid in plan.admitted:
            req = by_id[rid]
            req.phase = RequestPhase.RUNNING
            self.queued.remove(req)
            self.running.append(req)

        self.used_blocks += plan.kv_blocks_needed

        for chunk in plan.composition.prefill_chunks:
            req = by_id[chunk.request_id]
            req.prefill_progress += chunk.chunk_tokens
            if req.prefill_progress > req.prompt_tokens:
                raise EngineError(f"{req.request_id}: prefill overran the prompt")
            if req.prefill_done:
                req.decoded = 1  # the prefill's last step yields the first token
                events.append(
                    TokenEvent(req.request_id, EventKind.FIRST_TOKEN, step_end_virtual_ns, self.steps)
                )
                if req.decoded >= req.output_tokens:
                    events.append(
                        TokenEvent(req.request_id, EventKind.FINISHED, step_end_virtual_ns, self.steps)
                    )
                    self._finish(req)

        for slot in plan.composition.decodes:
            req = by_id[slot.request_id]
            req.decoded += 1
            events.append(
                TokenEvent(req.request_id, EventKind.OUTPUT_TOKEN, step_end_virtual_ns, self.steps)
            )
            if req.decoded >= req.output_tokens:
                events.append(
                    TokenEvent(req.request_id, EventKind.FINISHED, step_end_virtual_ns, self.steps)
                )
                self._finish(req)

        self._check_accounting()
        return events

    def _finish(self, req: EngineRequest) -> None:
        req.phase = RequestPhase.FINISHED
        self.running.remove(req)
        self.finished.append(req)
        self.used_blocks -= _used_blocks(req, self.cfg.kv_block_tokens)

    def _check_accounting(self) -> None:
        # live blocks must equal the closed-form recomputation every step;
        # decode growth past the prompt reservation is allowed by design
        # (admission is the only capacity gate), so there is no <= capacity
        # assertion here.
        expected = sum(_used_blocks(r, self.cfg.kv_block_tokens) for r in self.running)
        if self.used_blocks != expected:
            raise EngineError(
                f"KV accounting diverged: counter={self.used_blocks}, "
                f"recomputed={expected} at step {self.steps}"
            )


# --- worker grid ------------------------------------------------------------


@dataclass
class _StepOrder:
    stage_ends: list[int]  # absolute virtual deadline per pipeline stage
    stop: bool = False


class _Worker:
    """One emulated device worker: a (tp_rank, stage) cell of the grid."""

    def __init__(self, pacer, tp_rank: int, stage: int, grid: "WorkerGrid") -> None:
        self.pacer = pacer
        self.tp_rank = tp_rank
        self.stage = stage
        self.grid = grid
        self.commands: queue.Queue[_StepOrder] = queue.Queue()
        self.thread = threading.Thread(
            target=self._run, name=f"worker-t{tp_rank}s{stage}", daemon=True
        )

    def _run(self) -> None:
        tp = self.grid.tp
        stages = self.grid.stages
        try:
            while True:
                order = self.commands.get()
                if order.stop:
                    self.pacer.finish()
                    self.grid.done.put((self.tp_rank, self.stage, None))
                    return
                if self.stage > 0:
                    # Receive activations from the upstream stage: a 2-party
                    # rendezvous per tensor rank at each stage boundary.
                    self.pacer.group_sync(f"hop.t{self.tp_rank}.s{self.stage}", 2)
                self.pacer.advance_to(order.stage_ends[self.stage])
                if tp > 1:
                    self.pacer.group_sync(f"tp.s{self.stage}", tp)
                if self.stage < stages - 1:
                    self.pacer.group_sync(f"hop.t{self.tp_rank}.s{self.stage + 1}", 2)
                self.grid.done.put((self.tp_rank, self.stage, None))
        except Exception as exc:  # propagate to the scheduler loop
            self.grid.done.put((self.tp_rank, self.stage, exc))


class WorkerGrid:
    """The tensor-parallel x pipeline-stage grid of worker actors."""

    def __init__(self, pacers: list[list], tp: int, stages: int) -> None:
        self.tp = tp
        self.stages = stages
        self.done: queue.Queue = queue.Queue()
        self.workers = [
            _Worker(pacers[t][s], t, s, self) for t in range(tp) for s in range(stages)
        ]
        self.clock_pacer = pacers[0][0]

    def start(self) -> None:
        for w in self.workers:
            w.thread.start()

    def execute(self, base_ns: int, duration_ns: int) -> None:
        """Run one step window across the grid, split evenly over stages."""
        per = duration_ns // self.stages
        ends = [base_ns + per * (s + 1) for s in range(self.stages)]
        ends[-1] = base_ns + duration_ns  # last stage absorbs rounding
        order = _StepOrder(stage_ends=ends)
        for w in self.workers:
            w.commands.put(order)
        self._wait_all()

    def stop(self) -> None:
        order = _StepOrder(stage_ends=[], stop=True)
        for w in self.workers:
            w.commands.put(order)
        self._wait_all()
        for w in self.workers:
            w.thread.join(timeout=5.0)

    def _wait_all(self) -> None:
        failures = []
        for _ in self.workers:
            _, _, exc = self.done.get()
            if exc is not None:
                failures.append(exc)
        if failures:
            raise failures[0]

    def virtual_now(self) -> int:
        return self.clock_pacer.virtual_now()


# --- the live engine ---------------------------------------------------------


@dataclass
class DeviceConfig:
    capacity_bytes: int = 1 << 30
    metadata_threshold_bytes: int = 4 * 1024 * 1024
    kv_block_bytes: int = 64 * 1024
    weights_bytes: int = 0

    @classmethod
    def from_doc(cls, doc: dict) -> "DeviceConfig":
        return cls(
            capacity_bytes=int(doc.get("capacity_bytes", 1 << 30)),
            metadata_threshold_bytes=int(doc.get("metadata_threshold_bytes", 4 * 1024 * 1024)),
            kv_block_bytes=int(doc.get("kv_block_bytes", 64 * 1024)),
            weights_bytes=int(doc.get("weights_bytes", 0)),
        )


class EmulatedEngine:
    """Scheduler loop plus ingest listener for one emulated replica.

    In timewarp mode every worker cell registers with the timekeeper as an
    actor, and the actor set is sealed before the run, so an idle engine
    cannot simply stop requesting jumps: the barrier would then never
    resolve and the dispatcher's jumps over idle gaps would crawl at wall
    pace.  Instead, an idle engine polls time forward in fixed virtual
    quanta.  Overshooting an arrival is harmless because batch formation
    anchors on submission stamps rather than on the clock, so the schedule
    stays independent of how the quanta land.
    """

    def __init__(
        self,
        cfg: EngineConfig,
        predictor,
        mode: str,
        device_cfg: DeviceConfig | None = None,
        timekeeper_request: str | None = None,
        timekeeper_broadcast: str | None = None,
        listen_host: str = "127.0.0.1",
    ) -> None:
        if mode not in ("timewarp", "sleep"):
            raise ValueError(f"mode must be 'timewarp' or 'sleep', got {mode!r}")
        self.cfg = cfg
        self.predictor = predictor
        self.mode = mode
        self.device_cfg = device_cfg or DeviceConfig()
        self.tk_request = timekeeper_request
        self.tk_broadcast = timekeeper_broadcast
        self.scheduler = Scheduler(cfg)
        self.events: list[TokenEvent] = []
        self.event_sink = None  # callable(TokenEvent) for incremental logging
        # boundary pad applied between steps whenever time advances at wall
        # pace (sleep mode, or degraded/suppressed jumps); see run()
        self.boundary_guard_s = 0.001
        # virtual slice an idle replica advances per poll while it has no
        # work to pace toward; see run()
        self.idle_quantum_ns = 100 * NS_PER_MS

        self._ingest: queue.Queue[EngineRequest] = queue.Queue()
        self._work_arrived = threading.Event()
        self._drain = threading.Event()
        self._listen_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen_sock.bind((listen_host, 0))
        self._listen_sock.listen(8)
        self._stopped = False

        self.allocator = DeviceAllocator(
            self.device_cfg.capacity_bytes, self.device_cfg.metadata_threshold_bytes
        )
        self._kv_pool = self.allocator.alloc(
            cfg.kv_capacity_blocks * self.device_cfg.kv_block_bytes, label="kv-pool"
        )
        if self.device_cfg.weights_bytes > 0:
            self.allocator.alloc(self.device_cfg.weights_bytes, label="weights")

        self.grid: WorkerGrid | None = None
        self._clients: list[TimekeeperClient] = []

    @property
    def submit_address(self) -> tuple[str, int]:
        return self._listen_sock.getsockname()

    # -- ingest -----------------------------------------------------------

    def _serve_ingest(self) -> None:
        while not self._stopped:
            try:
                conn, _ = self._listen_sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._ingest_conn, args=(conn,), daemon=True).start()

    def _ingest_conn(self, conn: socket.socket) -> None:
        try:
            while True:
                try:
                    doc = wire.recv_json(conn)
                except (wire.ConnectionClosed, OSError):
                    return
                kind = doc.get("kind")
                if kind == "submit":
                    req = EngineRequest(
                        request_id=doc["request_id"],
                        arrival_virtual_ns=int(doc["arrival_virtual_ns"]),
                        prompt_tokens=int(doc["prompt_tokens"]),
                        output_tokens=int(doc["output_tokens"]),
                    )
                    self._ingest.put(req)
                    self._work_arrived.set()
                    # ack only after the request is visible to the scheduler,
                    # so the dispatcher's next jump cannot outrun it
                    wire.send_json(conn, {"kind": "submit_ack", "request_id": req.request_id})
                elif kind == "drain":
                    self._drain.set()
                    self._work_arrived.set()
                    wire.send_json(conn, {"kind": "drain_ack"})
                else:
                    wire.send_json(conn, {"kind": "error", "detail": f"unknown kind {kind!r}"})
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _drain_ingest_queue(self) -> None:
        while True:
            try:
                req = self._ingest.get_nowait()
            except queue.Empty:
                return
            self.scheduler.submit(req)

    # -- setup -------------------------------------------------------------

    def _build_grid(self) -> WorkerGrid:
        tp, stages = self.cfg.workers_per_replica, self.cfg.pp_stages
        pacers: list[list] = []
        if self.mode == "timewarp":
            if not self.tk_request or not self.tk_broadcast:
                raise ValueError("timewarp mode requires timekeeper endpoints")
            for t in range(tp):
                row = []
                for s in range(stages):
                    client = TimekeeperClient.connect(
                        self.tk_request, self.tk_broadcast, role=Role.ACTOR
                    )
                    self._clients.append(client)
                    row.append(TimewarpPacer(client))
                pacers.append(row)
        else:
            registry = BarrierRegistry()
            pacers = [[SleepPacer(registry) for _ in range(stages)] for _ in range(tp)]
        return WorkerGrid(pacers, tp, stages)

    # -- main loop ------------------------------------------------------------

    def start_workers(self) -> None:
        """Register and launch the worker grid.

        Callers that gate on a readiness handshake must invoke this before
        announcing the engine, so that every worker is registered with the
        timekeeper before anyone can seal registration.
        """
        threading.Thread(target=self._serve_ingest, name="engine-ingest", daemon=True).start()
        self.grid = self._build_grid()
        self.grid.start()

    def run(self) -> None:
        if self.grid is None:
            self.start_workers()
        scratch = self.allocator.alloc(4096, label="step-descriptor")
        try:
            prev_end: int | None = None
            while True:
                # Ingest settle pad: a submission whose stamp falls at or
                # before the next step's start may still be in flight on the
                # wire when the previous step ends.  Padding every formation
                # by a fixed wall slice bounds that race; the admission
                # horizon below makes the pad one-sided (it can let due work
                # in, never pull future work forward).  Paced modes absorb
                # the pad inside their next deadline sleep.
                time.sleep(self.boundary_guard_s)
                self._drain_ingest_queue()
                if prev_end is not None:
                    anchor = prev_end
                elif self.scheduler.running:
                    anchor = self.grid.virtual_now()
                else:
                    anchor = self.scheduler.earliest_queued_stamp()
                plan = self.scheduler.next_plan(anchor)
                if plan.is_empty():
                    if not self.scheduler.has_work():
                        if self._drain.is_set():
                            break
                        prev_end = None
                        if self.mode == "timewarp":
                            # Idle: the actor set is sealed, so the barrier
                            # still waits on this replica's workers.  Poll
                            # time forward one quantum at a time; arrivals
                            # the dispatcher is walking toward then resolve
                            # at warp speed.  Quantum overshoot is harmless:
                            # formation anchors on submission stamps.
                            base = self.grid.virtual_now()
                            self.grid.execute(base, self.idle_quantum_ns)
                        else:
                            self._work_arrived.wait(timeout=0.05)
                            self._work_arrived.clear()
                        continue
                    self.scheduler.check_stalled(plan, anchor)
                    # everything queued is stamped after this step's anchor:
                    # re-anchor at the earliest stamp and form again
                    prev_end = None
                    continue

                duration = self.predictor.predict(plan.composition)
                base = anchor if anchor is not None else self.grid.virtual_now()
                self._exercise_device(scratch, plan)
                self.grid.execute(base, duration)
                # Events carry the step window's exact end.  The grid has
                # already paced out the window, so virtual time has reached
                # it; re-reading the clock here would only add wake jitter.
                step_end = base + duration
                for event in self.scheduler.apply(plan, step_end):
                    self.events.append(event)
                    if self.event_sink is not None:
                        self.event_sink(event)
                prev_end = step_end
        finally:
            self.allocator.free(scratch)
            self._shutdown_grid()

    def _exercise_device(self, scratch, plan: BatchPlan) -> None:
        """Touch emulated memory the way a real step would.

        The step descriptor is METADATA: written and read back faithfully.
        KV writes land in the COMPUTE pool and are discarded; reading them
        back would abort the run, which is the point of the split.
        """
        descriptor = json.dumps(
            {
                "chunks": len(plan.composition.prefill_chunks),
                "decodes": len(plan.composition.decodes),
                "new_blocks": plan.kv_blocks_needed,
            }
        ).encode()
        self.allocator.write(scratch, 0, descriptor)
        readback = self.allocator.read(scratch, 0, len(descriptor))
        if readback != descriptor:
            raise EngineError("metadata readback mismatch")
        if plan.kv_blocks_needed > 0:
            block_index = self.scheduler.used_blocks % self.cfg.kv_capacity_blocks
            self.allocator.write(
                self._kv_pool, block_index * self.device_cfg.kv_block_bytes, b"\0" * 64
            )

    def _shutdown_grid(self) -> None:
        self._stopped = True
        if self.grid is not None:
            try:
                self.grid.stop()
            except Exception:
                log.exception("worker grid shutdown failed")
        for client in self._clients:
            client.close()
        try:
            self._listen_sock.close()
        except OSError:
            pass

"""The timekeeper service: registration, jump barriers, and collectives.

The timekeeper owns global virtual time.  Actors request jumps to absolute
virtual targets; when every eligible actor has an outstanding request the
barrier resolves, advancing the shared offset so that virtual time lands on
the *minimum* requested target.  Actors whose targets lie further out simply
remain blocked and resubmit in later rounds, so no actor ever observes time
beyond what it asked for.

Consecutive clock broadcasts are separated by at least a configurable
cooldown so that downstream consumers see a bounded update rate.

``BarrierCore`` is the single-threaded protocol state machine.  The socket
wrapper (:class:`TimekeeperServer`) funnels every decoded message through one
state thread, so the core never needs locks and its decision sequence is
fully captured by the structured log, which `timewarp.replay` can re-execute
and audit offline.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from timewarp import errors, wire
from timewarp.time_core import NS_PER_US, wall_now
from timewarp.wire import Message, MessageType, Role

log = logging.getLogger(__name__)

DEFAULT_COOLDOWN_US = 500
STALL_AFTER_NS = 2_000_000_000  # barrier or collective open this long => diagnostic record


def parse_endpoint(text: str) -> tuple[str, int]:
    """Parse ``host:port`` into a connectable address tuple."""
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


def format_endpoint(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


@dataclass
class _Client:
    client_id: str
    role: Role
    active: bool = True


@dataclass
class _Group:
    group_id: str
    generation: int = 0
    expected: int | None = None
    arrived: set[str] = field(default_factory=set)
    open_since_ns: int | None = None


class BarrierCore:
    """Single-threaded protocol state machine.

    The caller provides ``emit`` (deliver a broadcast frame to subscribers)
    and may override ``clock``/``sleep`` for deterministic tests.  Handlers
    validate, mutate state, hand the acknowledgement to ``reply``, and only
    then attempt barrier resolution, so acks are never delayed behind the
    broadcast cooldown.
    """

    def __init__(
        self,
        cooldown_ns: int = DEFAULT_COOLDOWN_US * NS_PER_US,
        emit=None,
        log_record=None,
        clock=wall_now,
        sleep=time.sleep,
        suppress_broadcasts: bool = False,
    ) -> None:
        if cooldown_ns < 0:
            raise ValueError(f"cooldown must be >= 0, got {cooldown_ns}")
        self.cooldown_ns = cooldown_ns
        self._emit = emit or (lambda msg: None)
        self._log = log_record or (lambda rec: None)
        self._clock = clock
        self._sleep = sleep
        self.suppress_broadcasts = suppress_broadcasts

        self.offset_ns = 0
        self.seq = 0
        self.sealed = False
        self.clients: dict[str, _Client] = {}
        self.pending: dict[str, int] = {}
        self.exempt: set[str] = set()
        self.groups: dict[str, _Group] = {}
        self.last_broadcast_wall_ns: int | None = None
        self.barrier_open_since_ns: int | None = None
        self._next_client = 1

    # -- client bookkeeping -------------------------------------------------

    def active_actors(self) -> list[str]:
        return [c.client_id for c in self.clients.values() if c.active and c.role is Role.ACTOR]

    def eligible_count(self) -> int:
        """Actors that the barrier currently waits for.

        Actors blocked inside a collective are exempt: they cannot submit a
        jump while they wait, so counting them would deadlock both barriers.
        """
        actors = self.active_actors()
        return len(actors) - sum(1 for a in actors if a in self.exempt)

    def _require_client(self, client_id: str | None) -> _Client:
        client = self.clients.get(client_id or "")
        if client is None:
            raise errors.UnknownClient(f"no such client {client_id!r}")
        if not client.active:
            raise errors.InvalidState(f"client {client_id} already deregistered")
        return client

    # -- message handlers ----------------------------------------------------

    def handle(self, msg: Message, reply=None) -> Message:
        """Dispatch one inbound message, returning (and optionally sending) its ack."""
        reply = reply or (lambda ack: None)
        handlers = {
            MessageType.REGISTER: self._on_register,
            MessageType.SEAL: self._on_seal,
            MessageType.JUMP_REQUEST: self._on_jump_request,
            MessageType.COLLECTIVE_ENTER: self._on_collective_enter,
            MessageType.DEREGISTER: self._on_deregister,
        }
        handler = handlers.get(msg.type)
        if handler is None:
            raise wire.MalformedBody(f"clients may not send {msg.type.value}")
        try:
            return handler(msg, reply)
        except errors.ProtocolError as exc:
            ack_type = {
                MessageType.REGISTER: MessageType.REGISTER_ACK,
                MessageType.JUMP_REQUEST: MessageType.JUMP_ACK,
            }.get(msg.type, msg.type)
            ack = Message(type=ack_type, client_id=msg.client_id, error=errors.encode_error(exc))
            reply(ack)
            return ack

    def _on_register(self, msg: Message, reply) -> Message:
        if self.sealed:
            raise errors.RegistrationSealed("actor set already sealed; joining mid-run is rejected")
        try:
            role = Role(msg.role)
        except ValueError:
            raise wire.MalformedBody(f"unknown role {msg.role!r}") from None
        client_id = f"{role.value.lower()}{self._next_client}"
        self._next_client += 1
        self.clients[client_id] = _Client(client_id, role)
        self._log(
            {
                "event": "register",
                "client_id": client_id,
                "role": role.value,
                "offset_ns": self.offset_ns,
                "seq": self.seq,
                "wall_ns": self._clock(),
            }
        )
        ack = Message(
            type=MessageType.REGISTER_ACK,
            client_id=client_id,
            offset=self.offset_ns,
            seq=self.seq,
        )
        reply(ack)
        return ack

    def _on_seal(self, msg: Message, reply) -> Message:
        if not self.sealed:
            if not self.active_actors():
                raise errors.NoActors("cannot seal with zero registered actors")
            self.sealed = True
            self._log(
                {
                    "event": "seal",
                    "num_actors": len(self.active_actors()),
                    "wall_ns": self._clock(),
                }
            )
        # sealing twice is a harmless no-op
        ack = Message(type=MessageType.SEAL, client_id=msg.client_id)
        reply(ack)
        self._try_resolve()
        return ack

    def _on_jump_request(self, msg: Message, reply) -> Message:
        client = self._require_client(msg.client_id)
        if client.role is not Role.ACTOR:
            raise errors.RoleViolation(f"{client.client_id} is an observer; observers cannot jump")
        if msg.target is None or msg.target <= 0:
            raise errors.InvalidDelta(f"jump target must be positive, got {msg.target}")
        # A re-request overwrites the previous entry: one outstanding target
        # per actor per round.
        self.pending[client.client_id] = msg.target
        self.exempt.discard(client.client_id)
        if self.barrier_open_since_ns is None:
            self.barrier_open_since_ns = self._clock()
        self._log(
            {
                "event": "request",
                "client_id": client.client_id,
                "target_ns": msg.target,
                "wall_ns": self._clock(),
            }
        )
        ack = Message(type=MessageType.JUMP_ACK, client_id=client.client_id)
        reply(ack)
        self._try_resolve()
        return ack

    def _on_collective_enter(self, msg: Message, reply) -> Message:
        client = self._require_client(msg.client_id)
        if client.role is not Role.ACTOR:
            raise errors.RoleViolation(f"{client.client_id} is an observer; collectives are for actors")
        if not msg.group_id:
            raise wire.MalformedBody("COLLECTIVE_ENTER missing group_id")
        if msg.expected is None or msg.expected < 1:
            raise errors.ExpectedMismatch(f"expected must be >= 1, got {msg.expected}")
        group = self.groups.setdefault(msg.group_id, _Group(msg.group_id))
        if group.arrived and group.expected != msg.expected:
            raise errors.ExpectedMismatch(
                f"group {msg.group_id!r} opened with expected={group.expected}, "
                f"got expected={msg.expected}"
            )
        if not group.arrived:
            group.expected = msg.expected
            group.open_since_ns = self._clock()
        generation = group.generation
        group.arrived.add(client.client_id)
        # While a member waits for the release it cannot drive time, so the
        # jump barrier must not wait for it.
        self.exempt.add(client.client_id)
        self.pending.pop(client.client_id, None)
        self._log(
            {
                "event": "collective_enter",
                "client_id": client.client_id,
                "group_id": msg.group_id,
                "expected": msg.expected,
                "generation": generation,
                "wall_ns": self._clock(),
            }
        )
        if len(group.arrived) == group.expected:
            members = sorted(group.arrived)
            self._log(
                {
                    "event": "collective_release",
                    "group_id": msg.group_id,
                    "generation": generation,
                    "members": members,
                    "wall_ns": self._clock(),
                }
            )
            self._emit(
                Message(
                    type=MessageType.COLLECTIVE_RELEASE,
                    group_id=msg.group_id,
                    generation=generation,
                )
            )
            group.generation += 1
            group.arrived.clear()
            group.expected = None
            group.open_since_ns = None
            for member in members:
                self.exempt.discard(member)
        ack = Message(
            type=MessageType.COLLECTIVE_ENTER,
            client_id=client.client_id,
            group_id=msg.group_id,
            generation=generation,
        )
        reply(ack)
        self._try_resolve()
        return ack

    def _on_deregister(self, msg: Message, reply) -> Message:
        client = self.clients.get(msg.client_id or "")
        if client is None:
            raise errors.UnknownClient(f"no such client {msg.client_id!r}")
        if client.active:
            client.active = False
            self.pending.pop(client.client_id, None)
            self.exempt.discard(client.client_id)
            for group in self.groups.values():
                group.arrived.discard(client.client_id)
            self._log(
                {
                    "event": "deregister",
                    "client_id": client.client_id,
                    "wall_ns": self._clock(),
                }
            )
        ack = Message(type=MessageType.DEREGISTER, client_id=client.client_id)
        reply(ack)
        self._try_resolve()
        return ack

    # -- barrier resolution ---------------------------------------------------

    def _try_resolve(self) -> None:
        if not self.sealed:
            return
        eligible = self.eligible_count()
        if eligible <= 0 or len(self.pending) != eligible:
            return
        self._resolve()

    def _resolve(self) -> None:
        t_min = min(self.pending.values())
        wall = self._clock()
        if wall < t_min and self.last_broadcast_wall_ns is not None and self.cooldown_ns > 0:
            wait_ns = self.last_broadcast_wall_ns + self.cooldown_ns - wall
            if wait_ns > 0:
                self._sleep(wait_ns / 1e9)
            wall = self._clock()
        will_broadcast = wall < t_min
        self._log(
            {
                "event": "resolve",
                "t_min_ns": t_min,
                "wall_ns": wall,
                "pending": dict(sorted(self.pending.items())),
                "eligible": self.eligible_count(),
                "broadcast": will_broadcast,
            }
        )
        if will_broadcast:
            # Advance only to the nearest requested target: actors with
            # further targets must not see time pass them by.
            self.offset_ns = max(self.offset_ns, t_min - wall)
            self.seq += 1
            stamp = self._clock()
            self._log(
                {
                    "event": "broadcast",
                    "offset_ns": self.offset_ns,
                    "seq": self.seq,
                    "wall_ns": stamp,
                    "suppressed": self.suppress_broadcasts,
                }
            )
            if not self.suppress_broadcasts:
                self._emit(
                    Message(type=MessageType.CLOCK_UPDATE, offset=self.offset_ns, seq=self.seq)
                )
            self.last_broadcast_wall_ns = stamp
        self.pending.clear()
        self.barrier_open_since_ns = None

    # -- diagnostics -----------------------------------------------------------

    def stalled(self, now_ns: int | None = None, after_ns: int = STALL_AFTER_NS) -> dict | None:
        """Report barrier rounds or collectives that have been open too long."""
        now = now_ns if now_ns is not None else self._clock()
        record: dict = {}
        if (
            self.sealed
            and self.pending
            and self.barrier_open_since_ns is not None
            and now - self.barrier_open_since_ns > after_ns
        ):
            waiting = sorted(
                set(self.active_actors()) - set(self.pending) - self.exempt
            )
            record["barrier"] = {
                "pending": dict(sorted(self.pending.items())),
                "waiting_for": waiting,
                "open_ms": (now - self.barrier_open_since_ns) // 1_000_000,
            }
        groups = {}
        for group in self.groups.values():
            if group.arrived and group.open_since_ns is not None and now - group.open_since_ns > after_ns:
                groups[group.group_id] = {
                    "arrived": sorted(group.arrived),
                    "expected": group.expected,
                    "open_ms": (now - group.open_since_ns) // 1_000_000,
                }
        if groups:
            record["collectives"] = groups
        return record or None


@dataclass
class _Inbound:
    conn: socket.socket | None
    msg: Message | None


class TimekeeperServer:
    """Socket front-end for :class:`BarrierCore`.

    Two listening endpoints: a request endpoint carrying framed
    request/acknowledgement exchanges, and a broadcast endpoint to which the
    server pushes every clock update and collective release.  Frame intake
    runs on per-connection reader threads; all protocol state is owned by a
    single state thread fed through a queue, so handler order is the log
    order.
    """

    def __init__(
        self,
        request_endpoint: str = "127.0.0.1:0",
        broadcast_endpoint: str = "127.0.0.1:0",
        cooldown_us: int = DEFAULT_COOLDOWN_US,
        log_path: str | None = None,
        suppress_broadcasts: bool = False,
    ) -> None:
        self._request_addr = parse_endpoint(request_endpoint)
        self._broadcast_addr = parse_endpoint(broadcast_endpoint)
        self._log_path = log_path
        self._log_file = None
        self._queue: queue.Queue[_Inbound] = queue.Queue()
        self._subscribers: list[socket.socket] = []
        self._sub_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self.core = BarrierCore(
            cooldown_ns=cooldown_us * NS_PER_US,
            emit=self._broadcast,
            log_record=self._write_record,
            suppress_broadcasts=suppress_broadcasts,
        )
        self._request_sock: socket.socket | None = None
        self._broadcast_sock: socket.socket | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self._log_path:
            self._log_file = open(self._log_path, "w", buffering=1)
        self._request_sock = self._listen(self._request_addr)
        self._broadcast_sock = self._listen(self._broadcast_addr)
        self._write_record(
            {
                "event": "start",
                "cooldown_ns": self.core.cooldown_ns,
                "suppress_broadcasts": self.core.suppress_broadcasts,
                "wall_ns": wall_now(),
            }
        )
        for target, name in (
            (self._accept_requests, "tk-accept-req"),
            (self._accept_subscribers, "tk-accept-sub"),
            (self._state_loop, "tk-state"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        log.info(
            "timekeeper listening: requests on %s, broadcasts on %s",
            format_endpoint(self.request_address),
            format_endpoint(self.broadcast_address),
        )

    @staticmethod
    def _listen(addr: tuple[str, int]) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(addr)
        sock.listen(64)
        # closing a listener does not wake a blocked accept() on Linux, so
        # the accept loops poll; accepted sockets come out blocking
        sock.settimeout(0.1)
        return sock

    @property
    def request_address(self) -> tuple[str, int]:
        assert self._request_sock is not None
        return self._request_sock.getsockname()

    @property
    def broadcast_address(self) -> tuple[str, int]:
        assert self._broadcast_sock is not None
        return self._broadcast_sock.getsockname()

    def stop(self) -> None:
        if self._stopping.is_set():
            return
        self._stopping.set()
        self._queue.put(_Inbound(None, None))  # wake the state thread
        for sock in (self._request_sock, self._broadcast_sock):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass
        with self._sub_lock:
            for conn in self._subscribers:
                try:
                    conn.close()
                except OSError:
                    pass
            self._subscribers.clear()
        for t in self._threads:
            t.join(timeout=2.0)
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def join(self) -> None:
        """Block until the state thread exits (after SHUTDOWN or stop())."""
        for t in self._threads:
            if t.name == "tk-state":
                t.join()

    # -- socket plumbing ------------------------------------------------------

    def _accept_requests(self) -> None:
        assert self._request_sock is not None
        while not self._stopping.is_set():
            try:
                conn, _ = self._request_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._request_conn, args=(conn,), daemon=True)
            t.start()

    def _request_conn(self, conn: socket.socket) -> None:
        try:
            while not self._stopping.is_set():
                try:
                    msg = wire.recv_message(conn)
                except wire.ConnectionClosed:
                    return
                except wire.MalformedBody as exc:
                    # connection-fatal: a desynchronized peer cannot be trusted
                    log.warning("dropping request connection: %s", exc)
                    return
                except OSError:
                    return
                self._queue.put(_Inbound(conn, msg))
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _accept_subscribers(self) -> None:
        assert self._broadcast_sock is not None
        while not self._stopping.is_set():
            try:
                conn, _ = self._broadcast_sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._sub_lock:
                self._subscribers.append(conn)
            threading.Thread(target=self._watch_subscriber, args=(conn,), daemon=True).start()

    def _watch_subscriber(self, conn: socket.socket) -> None:
        # subscribers never send payload; a read returning EOF means they left
        try:
            while conn.recv(4096):
                pass
        except OSError:
            pass
        with self._sub_lock:
            if conn in self._subscribers:
                self._subscribers.remove(conn)
        try:
            conn.close()
        except OSError:
            pass

    def _broadcast(self, msg: Message) -> None:
        frame = wire.encode(msg)
        with self._sub_lock:
            subs = list(self._subscribers)
        dead = []
        for conn in subs:
            try:
                conn.sendall(frame)
            except OSError:
                dead.append(conn)
        if dead:
            with self._sub_lock:
                for conn in dead:
                    if conn in self._subscribers:
                        self._subscribers.remove(conn)

    # -- state thread ----------------------------------------------------------

    def _state_loop(self) -> None:
        last_stall_check = wall_now()
        while not self._stopping.is_set():
            try:
                item = self._queue.get(timeout=0.5)
            except queue.Empty:
                item = None
            if self._stopping.is_set():
                return
            if item is not None and item.msg is not None:
                if item.msg.type is MessageType.SHUTDOWN:
                    self._write_record({"event": "shutdown", "wall_ns": wall_now()})
                    self._send(item.conn, Message(type=MessageType.SHUTDOWN))
                    self._broadcast(Message(type=MessageType.SHUTDOWN))
                    self._stopping.set()
                    return
                try:
                    self.core.handle(item.msg, reply=lambda ack: self._send(item.conn, ack))
                except wire.MalformedBody as exc:
                    log.warning("rejecting malformed message: %s", exc)
                    try:
                        if item.conn is not None:
                            item.conn.close()
                    except OSError:
                        pass
            now = wall_now()
            if now - last_stall_check > 1_000_000_000:
                last_stall_check = now
                stall = self.core.stalled(now)
                if stall:
                    stall_record = {"event": "stall", "wall_ns": now, **stall}
                    self._write_record(stall_record)
                    log.warning("stalled: %s", json.dumps(stall))

    @staticmethod
    def _send(conn: socket.socket | None, msg: Message) -> None:
        if conn is None:
            return
        try:
            wire.send_message(conn, msg)
        except OSError:
            pass

    def _write_record(self, record: dict) -> None:
        if self._log_file is not None:
            self._log_file.write(json.dumps(record, separators=(",", ":")) + "\n")

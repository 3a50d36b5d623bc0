"""Client handle for the timekeeper service.

A handle owns two sockets: a request connection for synchronous
request/acknowledgement exchanges, and a subscription to the broadcast
endpoint, drained by a background receiver thread that folds clock updates
into a local :class:`~timewarp.time_core.VirtualClock`.

Connection order matters: the handle subscribes to broadcasts *before*
registering, so an update published during registration is never missed --
the registration ack carries the then-current offset and the clock merges
whichever of the two is newer.

``virtual_now`` is wait-free.  ``time_jump`` may block, and its waiting is
bounded: if no clock update arrives within the remaining jump distance, the
handle simply observes that wall time has carried virtual time forward and
re-checks.  A lost or silent timekeeper therefore degrades the run to
wall-clock speed without ever producing a wrong timestamp.

One logical caller per handle: ``time_jump``/``collective_*``/``deregister``
must not be invoked concurrently on the same handle.
"""

from __future__ import annotations

import logging
import os
import socket
import threading

from timewarp import errors, wire
from timewarp.time_core import VirtualClock, wall_now
from timewarp.timekeeper import parse_endpoint
from timewarp.wire import Message, MessageType, Role

log = logging.getLogger(__name__)

ACK_TIMEOUT_S = 5.0
ENV_REQUEST_ENDPOINT = "TIMEKEEPER_REQ_ADDR"
ENV_BROADCAST_ENDPOINT = "TIMEKEEPER_SUB_ADDR"


class TimekeeperClient:
    """One registered participant (actor or observer)."""

    def __init__(
        self,
        request_sock: socket.socket,
        broadcast_sock: socket.socket,
        role: Role,
    ) -> None:
        self._request_sock = request_sock
        self._broadcast_sock = broadcast_sock
        self.role = role
        self.client_id: str | None = None
        self.clock = VirtualClock()
        self._cv = threading.Condition()
        self._releases: dict[str, int] = {}
        self._connected = True
        self._registered = False
        self._recv_thread = threading.Thread(target=self._recv_loop, daemon=True)

    # -- construction -----------------------------------------------------

    @classmethod
    def connect(
        cls,
        request_endpoint: str | None = None,
        broadcast_endpoint: str | None = None,
        role: Role | str = Role.OBSERVER,
    ) -> "TimekeeperClient":
        """Subscribe, register, and return a live handle."""
        request_endpoint = request_endpoint or os.environ.get(ENV_REQUEST_ENDPOINT)
        broadcast_endpoint = broadcast_endpoint or os.environ.get(ENV_BROADCAST_ENDPOINT)
        if not request_endpoint or not broadcast_endpoint:
            raise ValueError(
                "timekeeper endpoints required (args or "
                f"{ENV_REQUEST_ENDPOINT}/{ENV_BROADCAST_ENDPOINT})"
            )
        if isinstance(role, str):
            role = Role(role.upper())

        # Subscribe first: an update broadcast while we register is caught
        # either by the receiver thread or by the offset in the ack.
        bsock = cls._open(parse_endpoint(broadcast_endpoint))
        try:
            rsock = cls._open(parse_endpoint(request_endpoint))
        except OSError:
            bsock.close()
            raise
        client = cls(rsock, bsock, role)
        client._recv_thread.start()
        try:
            client._register()
        except Exception:
            client.close()
            raise
        return client

    @staticmethod
    def _open(addr: tuple[str, int]) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.connect(addr)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def _register(self) -> None:
        ack = self._rpc(
            Message(type=MessageType.REGISTER, role=self.role.value),
            expect=MessageType.REGISTER_ACK,
        )
        self.client_id = ack.client_id
        if ack.offset is not None and ack.seq is not None:
            self.clock.apply_update(ack.offset, ack.seq)
        self._registered = True
        log.debug("registered as %s (%s)", self.client_id, self.role.value)

    # -- receiver ------------------------------------------------------------

    def _recv_loop(self) -> None:
        try:
            while True:
                msg = wire.recv_message(self._broadcast_sock)
                if msg.type is MessageType.CLOCK_UPDATE:
                    self.clock.apply_update(msg.offset, msg.seq)
                    # Wake jump waiters on every update, grown offset or not:
                    # a resolved round means the waiter should re-check and
                    # resubmit its target if it is still short.
                    with self._cv:
                        self._cv.notify_all()
                elif msg.type is MessageType.COLLECTIVE_RELEASE:
                    with self._cv:
                        prev = self._releases.get(msg.group_id, -1)
                        self._releases[msg.group_id] = max(prev, msg.generation)
                        self._cv.notify_all()
                elif msg.type is MessageType.SHUTDOWN:
                    break
        except (wire.ConnectionClosed, wire.MalformedBody, OSError):
            pass
        with self._cv:
            self._connected = False
            self._cv.notify_all()

    # -- request channel -------------------------------------------------------

    def _rpc(self, msg: Message, expect: MessageType) -> Message:
        if not self._connected:
            raise errors.Disconnected("timekeeper connection lost")
        try:
            self._request_sock.settimeout(ACK_TIMEOUT_S)
            wire.send_message(self._request_sock, msg)
            ack = wire.recv_message(self._request_sock)
        except (socket.timeout, TimeoutError) as exc:
            raise errors.Disconnected(f"no ack for {msg.type.value} within {ACK_TIMEOUT_S}s") from exc
        except (wire.ConnectionClosed, OSError) as exc:
            raise errors.Disconnected(f"request channel failed: {exc}") from exc
        if ack.type is not expect:
            raise errors.ProtocolError(f"expected {expect.value} ack, got {ack.type.value}")
        if ack.error:
            raise errors.decode_error(ack.error)
        return ack

    # -- public surface -----------------------------------------------------------

    def virtual_now(self) -> int:
        """Current virtual time in nanoseconds.  Never blocks."""
        return self.clock.virtual_now()

    def time_jump(self, delta_ns: int) -> int:
        """Advance virtual time by ``delta_ns``.

        Blocks until virtual time has reached (at least) the target.  Returns
        the wall-clock nanoseconds the jump actually took.
        """
        if delta_ns <= 0:
            raise errors.InvalidDelta(f"jump delta must be positive, got {delta_ns}")
        self._require_actor()
        start = wall_now()
        target = self.clock.virtual_now() + delta_ns
        self.advance_to(target)
        return wall_now() - start

    def advance_to(self, target_ns: int) -> None:
        """Block until virtual time reaches the absolute target ``target_ns``.

        Returns immediately when the target is already in the past.  While
        short of the target, the handle keeps one jump request outstanding
        and waits for clock updates, bounded each round by the remaining
        distance so that a missing broadcast degrades to wall-speed waiting
        instead of an error.
        """
        self._require_actor()
        while self.clock.virtual_now() < target_ns:
            self._rpc(
                Message(type=MessageType.JUMP_REQUEST, client_id=self.client_id, target=target_ns),
                expect=MessageType.JUMP_ACK,
            )
            remaining_ns = target_ns - self.clock.virtual_now()
            if remaining_ns <= 0:
                break
            with self._cv:
                if not self._connected:
                    raise errors.Disconnected("timekeeper connection lost mid-jump")
                if self.clock.virtual_now() >= target_ns:
                    break
                self._cv.wait(remaining_ns / 1e9)

    def collective_enter(self, group_id: str, expected: int) -> int:
        """Join a collective rendezvous; returns the generation joined."""
        self._require_actor()
        ack = self._rpc(
            Message(
                type=MessageType.COLLECTIVE_ENTER,
                client_id=self.client_id,
                group_id=group_id,
                expected=expected,
            ),
            expect=MessageType.COLLECTIVE_ENTER,
        )
        assert ack.generation is not None
        return ack.generation

    def collective_wait_release(
        self, group_id: str, generation: int, timeout_s: float | None = None
    ) -> None:
        """Block until the given generation of the group releases."""
        with self._cv:
            ok = self._cv.wait_for(
                lambda: self._releases.get(group_id, -1) >= generation or not self._connected,
                timeout=timeout_s,
            )
            if not self._connected:
                raise errors.Disconnected("timekeeper connection lost during collective")
            if not ok:
                raise TimeoutError(
                    f"collective {group_id!r} generation {generation} did not release "
                    f"within {timeout_s}s"
                )

    def collective_barrier(
        self,
        group_id: str,
        expected: int,
        predicted_duration_ns: int,
        timeout_s: float | None = None,
    ) -> None:
        """Rendezvous with ``expected`` peers, then jointly jump the predicted window."""
        generation = self.collective_enter(group_id, expected)
        self.collective_wait_release(group_id, generation, timeout_s=timeout_s)
        if predicted_duration_ns > 0:
            self.advance_to(self.clock.virtual_now() + predicted_duration_ns)

    def seal(self) -> None:
        """Freeze the participant set; barrier arithmetic starts now."""
        self._rpc(Message(type=MessageType.SEAL, client_id=self.client_id), expect=MessageType.SEAL)

    def deregister(self) -> None:
        """Leave the run.  Idempotent; the handle can still read the clock."""
        if not self._registered:
            return
        self._registered = False
        self._rpc(
            Message(type=MessageType.DEREGISTER, client_id=self.client_id),
            expect=MessageType.DEREGISTER,
        )

    def shutdown_server(self) -> None:
        """Ask the timekeeper process to exit (harness teardown)."""
        try:
            self._rpc(Message(type=MessageType.SHUTDOWN), expect=MessageType.SHUTDOWN)
        except errors.Disconnected:
            pass

    def poke(self) -> None:
        """Wake any waiter on this handle (used by in-process event sources)."""
        with self._cv:
            self._cv.notify_all()

    def close(self) -> None:
        for sock in (self._request_sock, self._broadcast_sock):
            try:
                sock.close()
            except OSError:
                pass
        with self._cv:
            self._connected = False
            self._cv.notify_all()

    def _require_actor(self) -> None:
        if self.role is not Role.ACTOR:
            raise errors.RoleViolation("observers cannot drive virtual time")
        if not self._registered:
            raise errors.InvalidState("handle is deregistered; time_jump is no longer valid")

    def __enter__(self) -> "TimekeeperClient":
        return self

    def __exit__(self, *exc) -> None:
        try:
            self.deregister()
        except errors.ProtocolError:
            pass
        self.close()

"""Wire format for the timekeeper protocol.

Every frame is a 4-byte big-endian unsigned length ``N`` followed by ``N``
bytes of UTF-8 JSON.  The JSON object carries a ``type`` field naming the
message plus a flat payload.  64-bit nanosecond quantities (``offset`` and
``target``) are encoded as decimal strings so that JSON readers backed by
IEEE doubles cannot silently corrupt them; small counters (``seq``,
``expected``, ``generation``) are plain JSON numbers.

Decoding tolerates unknown extra fields, which leaves room for protocol
evolution.  A frame whose body is not valid JSON, lacks a ``type``, or names
an unknown type is a connection-fatal :class:`MalformedBody`.
"""

from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass

_LEN = struct.Struct("!I")
MAX_FRAME_BYTES = 1 << 20


class FrameTooShort(Exception):
    """Buffer does not yet contain a complete frame; read more bytes."""


class MalformedBody(Exception):
    """Frame body is not a valid protocol message.  Connection-fatal."""


class ConnectionClosed(Exception):
    """Peer closed the connection at a frame boundary."""


class MessageType(enum.Enum):
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    SEAL = "SEAL"
    JUMP_REQUEST = "JUMP_REQUEST"
    JUMP_ACK = "JUMP_ACK"
    CLOCK_UPDATE = "CLOCK_UPDATE"
    COLLECTIVE_ENTER = "COLLECTIVE_ENTER"
    COLLECTIVE_RELEASE = "COLLECTIVE_RELEASE"
    DEREGISTER = "DEREGISTER"
    SHUTDOWN = "SHUTDOWN"


class Role(enum.Enum):
    ACTOR = "ACTOR"
    OBSERVER = "OBSERVER"


# Fields that carry 64-bit nanosecond values and travel as decimal strings.
_NS_FIELDS = ("offset", "target")
# Fields that travel as plain JSON values.
_PLAIN_FIELDS = ("client_id", "role", "seq", "group_id", "expected", "generation", "error")

# Minimum fields a decoder insists on, per type.  Acks echo the request type
# with an optional error field, so requirements stay lax for those.
_REQUIRED = {
    MessageType.REGISTER: ("role",),
    MessageType.JUMP_REQUEST: ("client_id", "target"),
    MessageType.CLOCK_UPDATE: ("offset", "seq"),
    MessageType.COLLECTIVE_RELEASE: ("group_id", "generation"),
    MessageType.DEREGISTER: ("client_id",),
}


@dataclass
class Message:
    """One protocol message.  Unused fields stay None and are omitted on the wire."""

    type: MessageType
    client_id: str | None = None
    role: str | None = None
    offset: int | None = None
    target: int | None = None
    seq: int | None = None
    group_id: str | None = None
    expected: int | None = None
    generation: int | None = None
    error: str | None = None


def encode_body(msg: Message) -> bytes:
    """Serialize a message to its JSON body (no length prefix)."""
    doc: dict = {"type": msg.type.value}
    for name in _NS_FIELDS:
        value = getattr(msg, name)
        if value is not None:
            doc[name] = str(int(value))
    for name in _PLAIN_FIELDS:
        value = getattr(msg, name)
        if value is not None:
            doc[name] = value
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def encode(msg: Message) -> bytes:
    """Serialize a message to a complete length-prefixed frame."""
    body = encode_body(msg)
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Message:
    """Parse one frame body into a Message.

    Raises:
        MalformedBody: body is not JSON, not an object, missing ``type``,
            names an unknown type, or a required field is absent or of the
            wrong shape.
    """
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBody(f"body is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedBody("body is not a JSON object")
    type_name = doc.get("type")
    if type_name is None:
        raise MalformedBody("body missing 'type'")
    try:
        mtype = MessageType(type_name)
    except ValueError:
        raise MalformedBody(f"unknown message type {type_name!r}") from None

    msg = Message(type=mtype)
    for name in _NS_FIELDS:
        if name in doc:
            raw = doc[name]
            if not isinstance(raw, str):
                raise MalformedBody(f"field {name!r} must be a decimal string")
            try:
                setattr(msg, name, int(raw))
            except ValueError:
                raise MalformedBody(f"field {name!r} is not a decimal integer") from None
    for name in _PLAIN_FIELDS:
        if name in doc:
            setattr(msg, name, doc[name])

    for name in _REQUIRED.get(mtype, ()):
        if getattr(msg, name) is None:
            raise MalformedBody(f"{mtype.value} missing required field {name!r}")
    return msg


def decode(buf: bytes) -> tuple[Message, int]:
    """Decode one frame from the front of ``buf``.

    Returns:
        (message, bytes_consumed)

    Raises:
        FrameTooShort: fewer bytes than one complete frame.
        MalformedBody: the frame length is absurd or the body is invalid.
    """
    if len(buf) < _LEN.size:
        raise FrameTooShort(f"need {_LEN.size} header bytes, have {len(buf)}")
    (length,) = _LEN.unpack_from(buf)
    if length > MAX_FRAME_BYTES:
        raise MalformedBody(f"frame length {length} exceeds limit {MAX_FRAME_BYTES}")
    end = _LEN.size + length
    if len(buf) < end:
        raise FrameTooShort(f"need {end} bytes, have {len(buf)}")
    return decode_body(buf[_LEN.size:end]), end


# --- socket helpers -------------------------------------------------------
#
# The same length-prefixed framing is reused for the engine's submission
# channel, which exchanges free-form JSON objects rather than Messages, so
# the raw dict variants are public as well.


def send_json(sock: socket.socket, doc: dict) -> None:
    body = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    sock.sendall(_LEN.pack(len(body)) + body)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionClosed(f"peer closed with {remaining} of {n} bytes unread")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_json(sock: socket.socket) -> dict:
    header = sock.recv(_LEN.size)
    if not header:
        raise ConnectionClosed("peer closed at frame boundary")
    while len(header) < _LEN.size:
        more = sock.recv(_LEN.size - len(header))
        if not more:
            raise ConnectionClosed("peer closed inside frame header")
        header += more
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise MalformedBody(f"frame length {length} exceeds limit {MAX_FRAME_BYTES}")
    body = recv_exact(sock, length)
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBody(f"body is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedBody("body is not a JSON object")
    return doc


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


def recv_message(sock: socket.socket) -> Message:
    header = recv_exact_or_eof(sock)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise MalformedBody(f"frame length {length} exceeds limit {MAX_FRAME_BYTES}")
    return decode_body(recv_exact(sock, length))


def recv_exact_or_eof(sock: socket.socket) -> bytes:
    """Read a frame header, raising ConnectionClosed only at a clean boundary."""
    first = sock.recv(1)
    if not first:
        raise ConnectionClosed("peer closed at frame boundary")
    rest = recv_exact(sock, _LEN.size - 1)
    return first + rest

import json
import socket
import struct
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from timewarp import wire
from timewarp.wire import (
    ConnectionClosed,
    FrameTooShort,
    MalformedBody,
    Message,
    MessageType,
    Role,
)


def test_frame_layout_is_length_prefixed_json():
    msg = Message(type=MessageType.JUMP_ACK, client_id="actor1")
    frame = wire.encode(msg)
    (length,) = struct.unpack(">I", frame[:4])
    assert length == len(frame) - 4
    body = json.loads(frame[4:].decode("utf-8"))
    assert body["type"] == "JUMP_ACK"
    assert body["client_id"] == "actor1"


def test_ns_fields_encode_as_decimal_strings():
    # 2**60 ns exceeds double precision; the wire must not lose bits
    big = 2**60 + 12345
    msg = Message(type=MessageType.CLOCK_UPDATE, offset=big, seq=7)
    body = json.loads(wire.encode(msg)[4:])
    assert body["offset"] == str(big)
    back = wire.decode_body(wire.encode(msg)[4:])
    assert back.offset == big
    assert isinstance(back.offset, int)


def test_round_trip_every_type():
    samples = [
        Message(type=MessageType.REGISTER, role=Role.ACTOR.value),
        Message(type=MessageType.REGISTER_ACK, client_id="actor1", offset=0, seq=0),
        Message(type=MessageType.SEAL),
        Message(type=MessageType.JUMP_REQUEST, client_id="actor1", target=123456789),
        Message(type=MessageType.JUMP_ACK, client_id="actor1"),
        Message(type=MessageType.CLOCK_UPDATE, offset=55, seq=2),
        Message(
            type=MessageType.COLLECTIVE_ENTER,
            client_id="actor2",
            group_id="tp.s0",
            expected=4,
        ),
        Message(type=MessageType.COLLECTIVE_RELEASE, group_id="tp.s0", generation=3),
        Message(type=MessageType.DEREGISTER, client_id="actor1"),
        Message(type=MessageType.SHUTDOWN),
    ]
    for msg in samples:
        back = wire.decode_body(wire.encode(msg)[4:])
        assert back == msg


@given(
    offset=st.integers(min_value=0, max_value=2**63 - 1),
    seq=st.integers(min_value=0, max_value=2**31),
)
def test_clock_update_round_trip_property(offset, seq):
    msg = Message(type=MessageType.CLOCK_UPDATE, offset=offset, seq=seq)
    assert wire.decode_body(wire.encode(msg)[4:]) == msg


@given(
    target=st.integers(min_value=1, max_value=2**63 - 1),
    client=st.text(min_size=1, max_size=20),
)
def test_jump_request_round_trip_property(target, client):
    msg = Message(type=MessageType.JUMP_REQUEST, client_id=client, target=target)
    assert wire.decode_body(wire.encode(msg)[4:]) == msg


def test_decode_rejects_unknown_type():
    with pytest.raises(MalformedBody):
        wire.decode_body(json.dumps({"type": "NOT_A_THING"}).encode())


def test_decode_rejects_missing_required_field():
    # JUMP_REQUEST requires target
    with pytest.raises(MalformedBody):
        wire.decode_body(json.dumps({"type": "JUMP_REQUEST", "client_id": "a"}).encode())


def test_decode_rejects_non_json():
    with pytest.raises(MalformedBody):
        wire.decode_body(b"\xff\xfe not json")


def test_decode_rejects_bad_ns_string():
    with pytest.raises(MalformedBody):
        wire.decode_body(json.dumps({"type": "CLOCK_UPDATE", "offset": "12x", "seq": 1}).encode())


def test_oversized_frame_rejected():
    frame = struct.pack(">I", wire.MAX_FRAME_BYTES + 1) + b"x"
    with pytest.raises(MalformedBody):
        wire.decode(frame)


def test_decode_reports_incomplete_frames():
    msg = Message(type=MessageType.SEAL)
    frame = wire.encode(msg)
    with pytest.raises(FrameTooShort):
        wire.decode(frame[:2])  # header cut short
    with pytest.raises(FrameTooShort):
        wire.decode(frame[:-1])  # body cut short
    decoded, consumed = wire.decode(frame + b"extra")
    assert decoded == msg
    assert consumed == len(frame)


def _pipe() -> tuple[socket.socket, socket.socket]:
    return socket.socketpair()


def test_send_recv_message_over_socket():
    a, b = _pipe()
    try:
        msg = Message(type=MessageType.JUMP_REQUEST, client_id="actor9", target=42)
        wire.send_message(a, msg)
        assert wire.recv_message(b) == msg
    finally:
        a.close()
        b.close()


def test_recv_raises_connection_closed_on_eof():
    a, b = _pipe()
    a.close()
    try:
        with pytest.raises(ConnectionClosed):
            wire.recv_message(b)
    finally:
        b.close()


def test_recv_raises_on_truncated_frame():
    a, b = _pipe()
    try:
        frame = wire.encode(Message(type=MessageType.SEAL))
        a.sendall(frame[: len(frame) - 2])  # cut the body short
        a.close()
        with pytest.raises((FrameTooShort, ConnectionClosed)):
            wire.recv_message(b)
    finally:
        b.close()


def test_multiple_frames_in_sequence():
    a, b = _pipe()
    try:
        sent = [
            Message(type=MessageType.CLOCK_UPDATE, offset=i * 1000, seq=i) for i in range(1, 6)
        ]
        for msg in sent:
            wire.send_message(a, msg)
        got = [wire.recv_message(b) for _ in sent]
        assert got == sent
    finally:
        a.close()
        b.close()


def test_json_channel_round_trip():
    a, b = _pipe()
    try:
        doc = {"kind": "submit", "request_id": "r1", "arrival_virtual_ns": str(2**60)}
        results = []
        t = threading.Thread(target=lambda: results.append(wire.recv_json(b)))
        t.start()
        wire.send_json(a, doc)
        t.join(timeout=5)
        assert results == [doc]
    finally:
        a.close()
        b.close()

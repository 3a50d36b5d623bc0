"""Error types shared by the timekeeper service and its clients.

Server-side handlers raise these; the server encodes them into the ``error``
field of the acknowledgement frame as ``"Name: detail"`` and the client
re-raises the matching class, so a caller sees the same exception type on
either side of the wire.
"""

from __future__ import annotations


class ProtocolError(Exception):
    """Base class for errors that can travel over the wire."""


class RegistrationSealed(ProtocolError):
    """REGISTER received after the actor set was sealed."""


class NoActors(ProtocolError):
    """Seal attempted with zero registered actors."""


class UnknownClient(ProtocolError):
    """Message referenced a client_id the server has never issued."""


class RoleViolation(ProtocolError):
    """Operation requires a different role (e.g. observer sent a jump)."""


class ExpectedMismatch(ProtocolError):
    """Collective entered with a size that disagrees with earlier members."""


class InvalidDelta(ProtocolError):
    """time_jump called with a non-positive delta."""


class InvalidState(ProtocolError):
    """Operation on a handle that no longer supports it (e.g. after deregister)."""


class Disconnected(ProtocolError):
    """Transport to the timekeeper was lost or an ack never arrived."""


_BY_NAME = {
    cls.__name__: cls
    for cls in (
        RegistrationSealed,
        NoActors,
        UnknownClient,
        RoleViolation,
        ExpectedMismatch,
        InvalidDelta,
        InvalidState,
        Disconnected,
    )
}


def encode_error(exc: Exception) -> str:
    """Render an exception into a wire-safe ``error`` field value."""
    return f"{type(exc).__name__}: {exc}"


def decode_error(text: str) -> ProtocolError:
    """Rebuild the exception a server packed into an ``error`` field."""
    name, _, detail = text.partition(": ")
    cls = _BY_NAME.get(name, ProtocolError)
    return cls(detail or text)

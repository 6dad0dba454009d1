"""Signed wire envelopes: the authenticated-channel stand-in.

Every envelope is signed by the sender's long-term identity key over all
preceding bytes; receivers verify against their pinned copy of that key
before touching the body. Real deployments would run this over an encrypted
transport; the simulation's observer accordingly sees envelope metadata
(sender, type, size) but never bodies.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from . import crypto
from .encoding import MalformedBytes
from .errors import BadEnvelope

MSG_REQ = 1
MSG_ACCEPT = 2
MSG_SHARE = 3
MSG_ACK = 4
MSG_END = 5
MSG_BLOCK = 6
MSG_ERASE_REQ = 7
MSG_ERASE_ACK = 8

MSG_NAMES = {
    MSG_REQ: "REQ",
    MSG_ACCEPT: "ACCEPT",
    MSG_SHARE: "SHARE",
    MSG_ACK: "ACK",
    MSG_END: "END",
    MSG_BLOCK: "BLOCK",
    MSG_ERASE_REQ: "ERASE_REQ",
    MSG_ERASE_ACK: "ERASE_ACK",
}


@dataclass(frozen=True)
class Envelope:
    sender_id: str
    msg_type: int
    session_id: bytes
    body: bytes
    signature: bytes

    def signed_region(self) -> bytes:
        sender = self.sender_id.encode("utf-8")
        return (
            struct.pack(">H", len(sender))
            + sender
            + struct.pack(">B", self.msg_type)
            + self.session_id
            + struct.pack(">I", len(self.body))
            + self.body
        )

    def encode(self) -> bytes:
        return self.signed_region() + struct.pack(">I", len(self.signature)) + self.signature


def pack_envelope(
    sender_id: str,
    msg_type: int,
    session_id: bytes,
    body: bytes,
    identity_key: crypto.KeyPair,
    rng: random.Random,
) -> Envelope:
    if len(session_id) != 16:
        raise BadEnvelope("session id must be 16 bytes")
    if msg_type not in MSG_NAMES:
        raise BadEnvelope(f"unknown message type {msg_type}")
    unsigned = Envelope(sender_id, msg_type, session_id, body, b"")
    signature = crypto.sign(identity_key.private_key, unsigned.signed_region(), rng)
    return Envelope(sender_id, msg_type, session_id, body, signature)


def parse_envelope(raw: bytes) -> Envelope:
    try:
        (sender_len,) = struct.unpack_from(">H", raw, 0)
        pos = 2
        sender_id = raw[pos : pos + sender_len].decode("utf-8")
        pos += sender_len
        msg_type = raw[pos]
        pos += 1
        session_id = raw[pos : pos + 16]
        pos += 16
        (body_len,) = struct.unpack_from(">I", raw, pos)
        pos += 4
        body = raw[pos : pos + body_len]
        pos += body_len
        (sig_len,) = struct.unpack_from(">I", raw, pos)
        pos += 4
        signature = raw[pos : pos + sig_len]
        pos += sig_len
        if len(session_id) != 16 or len(body) != body_len or len(signature) != sig_len or pos != len(raw):
            raise ValueError("truncated")
        if msg_type not in MSG_NAMES:
            raise ValueError(f"unknown message type {msg_type}")
    except (struct.error, ValueError, UnicodeDecodeError, IndexError) as exc:
        raise BadEnvelope(f"malformed envelope: {exc}") from exc
    return Envelope(sender_id, msg_type, session_id, body, signature)


def verify_envelope(env: Envelope, sender_pub: crypto.PublicKey) -> bool:
    return crypto.verify(sender_pub, env.signed_region(), env.signature)

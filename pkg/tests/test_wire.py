import random

import pytest

from p3log import wire
from p3log.errors import BadEnvelope

from conftest import pooled_keypair

KEY = pooled_keypair(400)
OTHER = pooled_keypair(401)


def _env(body=b"hello", msg_type=wire.MSG_REQ):
    return wire.pack_envelope("alice", msg_type, b"\x05" * 16, body, KEY, random.Random(0))


def test_envelope_roundtrip():
    env = _env()
    parsed = wire.parse_envelope(env.encode())
    assert parsed == env
    assert wire.verify_envelope(parsed, KEY.public_key)


def test_envelope_layout():
    env = _env(body=b"abc")
    raw = env.encode()
    assert raw[:2] == b"\x00\x05"  # sender length
    assert raw[2:7] == b"alice"
    assert raw[7] == wire.MSG_REQ
    assert raw[8:24] == b"\x05" * 16
    assert raw[24:28] == b"\x00\x00\x00\x03"
    assert raw[28:31] == b"abc"


def test_envelope_tamper_detected():
    env = _env()
    raw = bytearray(env.encode())
    raw[30] ^= 0x01  # body byte
    parsed = wire.parse_envelope(bytes(raw))
    assert not wire.verify_envelope(parsed, KEY.public_key)


def test_envelope_wrong_key_rejected():
    env = _env()
    assert not wire.verify_envelope(env, OTHER.public_key)


def test_envelope_garbage_rejected():
    with pytest.raises(BadEnvelope):
        wire.parse_envelope(b"\x00")
    with pytest.raises(BadEnvelope):
        wire.parse_envelope(b"\x00\x02hi\x63" + b"\x00" * 24)  # bad msg type


def test_envelope_unknown_type_rejected():
    with pytest.raises(BadEnvelope):
        wire.pack_envelope("a", 99, b"\x00" * 16, b"", KEY, random.Random(0))

"""The permissionless usage-log chain: block format, proof-of-work mining,
validation, longest-chain selection, and pseudonym-indexed queries.

On-chain bytes never contain identities. Each block carries two one-time
pseudonyms and the same usage record encrypted once per side; the only link
from a pseudonym to a person lives in the local key stores of the two
parties involved.
"""

from __future__ import annotations

import os
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .crypto import Pseudonym, ZERO_PSEUDONYM
from .errors import AuthenticationFailure, InvalidBlock, LedgerError

CHAIN_MAGIC = b"P3LG"
CHAIN_VERSION = 1
MAX_DIFFICULTY = 32
DEFAULT_DIFFICULTY = 12
MAX_PURPOSE_BYTES = 1024

# Reserved datum id for decoy sessions; never appears in a chain record.
FAKE_DATUM_ID = b"\x00" * 16


# ---------------------------------------------------------------------------
# records and blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UsageRecord:
    """Content of one logged usage: who-less; the counterpart is referenced
    only by its one-time pseudonym."""

    datum_id: bytes
    timestamp: int
    purpose: str
    label_t: bytes
    counterpart_pseudonym: Pseudonym

    def __post_init__(self):
        if len(self.datum_id) != 16:
            raise LedgerError("datum_id must be 16 bytes")
        if len(self.label_t) != 16:
            raise LedgerError("label_t must be 16 bytes")
        if len(self.purpose.encode("utf-8")) > MAX_PURPOSE_BYTES:
            raise LedgerError("purpose exceeds 1024 UTF-8 bytes")

    def encode(self) -> bytes:
        purpose = self.purpose.encode("utf-8")
        return (
            self.datum_id
            + struct.pack(">Q", self.timestamp)
            + self.label_t
            + self.counterpart_pseudonym.digest
            + struct.pack(">H", len(purpose))
            + purpose
        )

    @classmethod
    def decode(cls, data: bytes) -> "UsageRecord":
        if len(data) < 74:
            raise LedgerError("truncated usage record")
        datum_id = data[:16]
        (timestamp,) = struct.unpack_from(">Q", data, 16)
        label_t = data[24:40]
        counterpart = Pseudonym(data[40:72])
        (plen,) = struct.unpack_from(">H", data, 72)
        purpose = data[74 : 74 + plen]
        if len(purpose) != plen or len(data) != 74 + plen:
            raise LedgerError("malformed usage record")
        return cls(datum_id, timestamp, purpose.decode("utf-8"), label_t, counterpart)


@dataclass(frozen=True)
class BlockPayload:
    consumer_pseudonym: Pseudonym
    owner_pseudonym: Pseudonym
    enc_consumer: bytes
    enc_owner: bytes

    def encode(self) -> bytes:
        return (
            self.consumer_pseudonym.digest
            + self.owner_pseudonym.digest
            + struct.pack(">I", len(self.enc_consumer))
            + self.enc_consumer
            + struct.pack(">I", len(self.enc_owner))
            + self.enc_owner
        )

    @classmethod
    def decode(cls, data: bytes) -> "BlockPayload":
        if len(data) < 72:
            raise LedgerError("truncated block payload")
        consumer = Pseudonym(data[0:32])
        owner = Pseudonym(data[32:64])
        (clen,) = struct.unpack_from(">I", data, 64)
        enc_c = data[68 : 68 + clen]
        off = 68 + clen
        if len(enc_c) != clen or len(data) < off + 4:
            raise LedgerError("malformed block payload")
        (olen,) = struct.unpack_from(">I", data, off)
        enc_o = data[off + 4 : off + 4 + olen]
        if len(enc_o) != olen or len(data) != off + 4 + olen:
            raise LedgerError("malformed block payload")
        return cls(consumer, owner, enc_c, enc_o)


@dataclass(frozen=True)
class Block:
    prev_hash: bytes
    nonce: int
    payload: BlockPayload

    def encode(self) -> bytes:
        return self.prev_hash + struct.pack(">Q", self.nonce) + self.payload.encode()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        if len(data) < 40:
            raise LedgerError("truncated block")
        prev_hash = data[:32]
        (nonce,) = struct.unpack_from(">Q", data, 32)
        payload = BlockPayload.decode(data[40:])
        return cls(prev_hash, nonce, payload)


def block_hash(block: Block) -> bytes:
    return crypto.digest(block.encode())


GENESIS_BLOCK = Block(
    prev_hash=b"\x00" * 32,
    nonce=0,
    payload=BlockPayload(ZERO_PSEUDONYM, ZERO_PSEUDONYM, b"", b""),
)
GENESIS_HASH = block_hash(GENESIS_BLOCK)


def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return 8 * len(digest) - value.bit_length()


def meets_difficulty(h: bytes, difficulty: int) -> bool:
    return leading_zero_bits(h) >= difficulty


def mine_block(
    prev_hash: bytes,
    payload: BlockPayload,
    difficulty: int,
    rng: Optional[random.Random] = None,
) -> Block:
    """Search nonces until the block hash has ``difficulty`` leading zero
    bits. The starting nonce comes from ``rng`` so independent miners walk
    different regions."""
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise LedgerError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    nonce = rng.getrandbits(64) if rng is not None else 0
    prefix = prev_hash
    body = payload.encode()
    while True:
        candidate = prefix + struct.pack(">Q", nonce) + body
        if meets_difficulty(crypto.digest(candidate), difficulty):
            return Block(prev_hash=prev_hash, nonce=nonce, payload=payload)
        nonce = (nonce + 1) & 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationError:
    """Where and how a chain failed validation (a value, not an exception)."""

    index: int
    kind: str  # bad-genesis | broken-link | insufficient-work


@dataclass
class Chain:
    blocks: list[Block] = field(default_factory=lambda: [GENESIS_BLOCK])
    difficulty: int = DEFAULT_DIFFICULTY

    def __len__(self) -> int:
        return len(self.blocks)

    def tip_hash(self) -> bytes:
        return block_hash(self.blocks[-1])

    def copy(self) -> "Chain":
        return Chain(blocks=list(self.blocks), difficulty=self.difficulty)


def validate_chain(chain: Chain) -> Optional[ValidationError]:
    """None when valid, else the first failure. Genesis is a pinned constant
    and exempt from the work rule."""
    if not chain.blocks or chain.blocks[0] != GENESIS_BLOCK:
        return ValidationError(index=0, kind="bad-genesis")
    prev = GENESIS_HASH
    for index in range(1, len(chain.blocks)):
        block = chain.blocks[index]
        h = block_hash(block)
        if not meets_difficulty(h, chain.difficulty):
            return ValidationError(index=index, kind="insufficient-work")
        if block.prev_hash != prev:
            return ValidationError(index=index, kind="broken-link")
        prev = h
    return None


def append_block(chain: Chain, block: Block) -> None:
    """Append a block that must extend the current tip at full difficulty."""
    if block.prev_hash != chain.tip_hash():
        raise InvalidBlock("block does not extend the tip")
    if not meets_difficulty(block_hash(block), chain.difficulty):
        raise InvalidBlock("block does not meet difficulty")
    chain.blocks.append(block)


def choose_chain(local: Chain, remote: Chain) -> Chain:
    """Longest valid chain wins; ties and invalid remotes keep the local."""
    if remote.difficulty != local.difficulty:
        return local
    if len(remote.blocks) <= len(local.blocks):
        return local
    if validate_chain(remote) is not None:
        return local
    return remote


def query_by_pseudonym(chain: Chain, pseudonym: Pseudonym) -> list[tuple[int, Block]]:
    """All blocks carrying the pseudonym on either side, with their indices."""
    hits = []
    for index, block in enumerate(chain.blocks):
        if index == 0:
            continue
        if pseudonym in (block.payload.consumer_pseudonym, block.payload.owner_pseudonym):
            hits.append((index, block))
    return hits


@dataclass(frozen=True)
class OwnEntry:
    """Result of decrypting one of our own chain entries."""

    pseudonym: Pseudonym
    role: str
    block_index: int
    record: Optional[UsageRecord]
    error: Optional[str]  # no-key | authentication-failure


def read_own_entries(chain: Chain, store) -> list[OwnEntry]:
    """Decrypt every chain entry belonging to a pseudonym in the store.

    Per-entry failures (erased keys, tampered payloads) are reported in the
    result rather than raised, so one bad entry never hides the others.
    """
    by_digest = {}
    for pseudonym, key_pair, role, _block_ref in store.key_records():
        by_digest[pseudonym.digest] = (pseudonym, key_pair, role)
    results: list[OwnEntry] = []
    for index, block in enumerate(chain.blocks):
        if index == 0:
            continue
        payload = block.payload
        for side_pseudonym, ciphertext in (
            (payload.consumer_pseudonym, payload.enc_consumer),
            (payload.owner_pseudonym, payload.enc_owner),
        ):
            hit = by_digest.get(side_pseudonym.digest)
            if hit is None:
                continue
            pseudonym, key_pair, role = hit
            if key_pair is None:
                results.append(OwnEntry(pseudonym, role, index, None, "no-key"))
                continue
            try:
                record = UsageRecord.decode(crypto.decrypt_record(key_pair.private_key, ciphertext))
                results.append(OwnEntry(pseudonym, role, index, record, None))
            except (AuthenticationFailure, LedgerError):
                results.append(OwnEntry(pseudonym, role, index, None, "authentication-failure"))
    return results


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def serialize_chain(chain: Chain) -> bytes:
    out = bytearray()
    out += CHAIN_MAGIC
    out += struct.pack(">H", CHAIN_VERSION)
    out += struct.pack(">B", chain.difficulty)
    for block in chain.blocks:
        encoded = block.encode()
        out += struct.pack(">I", len(encoded))
        out += encoded
    return bytes(out)


def deserialize_chain(data: bytes) -> Chain:
    if data[:4] != CHAIN_MAGIC:
        raise LedgerError("not a chain file")
    (version,) = struct.unpack_from(">H", data, 4)
    if version != CHAIN_VERSION:
        raise LedgerError(f"unsupported chain version {version}")
    difficulty = data[6]
    blocks = []
    pos = 7
    while pos < len(data):
        if pos + 4 > len(data):
            raise LedgerError("truncated chain file")
        (blen,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + blen > len(data):
            raise LedgerError("truncated chain file")
        blocks.append(Block.decode(data[pos : pos + blen]))
        pos += blen
    if not blocks:
        raise LedgerError("chain file has no blocks")
    return Chain(blocks=blocks, difficulty=difficulty)


def save_chain(chain: Chain, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(serialize_chain(chain))
    os.replace(tmp, path)


def load_chain(path: str) -> Chain:
    with open(path, "rb") as fh:
        return deserialize_chain(fh.read())

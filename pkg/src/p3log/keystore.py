"""Per-node private key store: master-seed sub-key derivation, pseudonym
records with counterparty links, link erasure, and threshold backup shards.

Erasing a link removes the counterparty identity and evidence outright; the
store is rewritten compacted so no trace survives in the persisted bytes.
What may remain is an anonymous key record (pseudonym, block reference,
optionally the key pair) so the node can still locate and, with keys kept,
decrypt its own on-chain entries.
"""

from __future__ import annotations

import os
import random
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import crypto
from .errors import (
    DuplicatePseudonym,
    IndexReuse,
    KeyStoreError,
    P3Error,
    UnknownPseudonym,
)

ROLE_OWNER = "owner"
ROLE_CONSUMER = "consumer"
_ROLE_CODES = {ROLE_OWNER: 0, ROLE_CONSUMER: 1}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}

STORE_MAGIC = b"P3KS"
STORE_VERSION = 1


@dataclass(frozen=True)
class MasterKey:
    """Root secret from which every key pair of a node is derived."""

    seed: bytes
    creation_time: int = 0

    def __post_init__(self):
        if len(self.seed) != 32 or self.seed == b"\x00" * 32:
            raise P3Error("master seed must be 32 non-zero bytes")


def subkey_seed(master: MasterKey, index: int) -> bytes:
    return crypto.keyed_digest(master.seed, b"subkey" + struct.pack(">Q", index))


def identity_seed(master: MasterKey) -> bytes:
    # Separate domain so the identity key never collides with sub-key indices.
    return crypto.keyed_digest(master.seed, b"identity")


def derive_subkey(master: MasterKey, index: int, bits: int = crypto.DEFAULT_KEY_BITS) -> crypto.KeyPair:
    """Deterministic sub-key: same (master, index) always yields the same
    pair; distinct indices yield unrelated pairs."""
    if index < 0:
        raise KeyStoreError(f"sub-key index must be >= 0, got {index}")
    return crypto.generate_keypair(bits, subkey_seed(master, index))


def derive_identity_keypair(master: MasterKey, bits: int = crypto.DEFAULT_KEY_BITS) -> crypto.KeyPair:
    return crypto.generate_keypair(bits, identity_seed(master))


@dataclass
class KeyStoreEntry:
    """Local, deletable link between one of our pseudonyms and the session
    that produced it. Deleting this record anonymizes the chain entry."""

    pseudonym: crypto.Pseudonym
    key_pair: Optional[crypto.KeyPair]
    role: str
    derivation_index: int = -1
    block_ref: Optional[bytes] = None
    counterparty_identity: Optional[str] = None
    evidence: Optional[bytes] = None

    def __post_init__(self):
        if self.role not in _ROLE_CODES:
            raise KeyStoreError(f"unknown role {self.role!r}")
        if self.key_pair is not None:
            derived = crypto.derive_pseudonym(self.key_pair.public_key.canonical_bytes())
            if derived != self.pseudonym:
                raise KeyStoreError("entry pseudonym does not match its key pair")


@dataclass
class RetainedKey:
    """Anonymous remainder of an erased entry: no counterparty, no evidence."""

    pseudonym: crypto.Pseudonym
    key_pair: Optional[crypto.KeyPair]
    role: str
    derivation_index: int = -1
    block_ref: Optional[bytes] = None


class KeyStore:
    """Single-writer store of a node's key material and pseudonym links."""

    def __init__(self, master: MasterKey, key_bits: int = crypto.DEFAULT_KEY_BITS):
        self.master = master
        self.key_bits = key_bits
        self._entries: dict[bytes, KeyStoreEntry] = {}
        self._retained: dict[bytes, RetainedKey] = {}
        self._by_block: dict[bytes, bytes] = {}  # block_ref -> pseudonym digest
        self._used_indices: set[int] = set()
        self._next_index = 0

    # -- key derivation ----------------------------------------------------

    def derive_subkey(self, index: int) -> crypto.KeyPair:
        """Derive the sub-key at an explicit index, marking it used."""
        if index in self._used_indices:
            raise IndexReuse(f"sub-key index {index} already used")
        kp = derive_subkey(self.master, index, self.key_bits)
        self._used_indices.add(index)
        return kp

    def allocate_onetime(self) -> tuple[crypto.KeyPair, int]:
        """Derive the next unused sub-key for a fresh one-time pseudonym."""
        while self._next_index in self._used_indices:
            self._next_index += 1
        index = self._next_index
        self._next_index += 1
        return self.derive_subkey(index), index

    def identity_keypair(self) -> crypto.KeyPair:
        return derive_identity_keypair(self.master, self.key_bits)

    # -- entries -------------------------------------------------------------

    def record_entry(self, entry: KeyStoreEntry) -> None:
        key = entry.pseudonym.digest
        if key in self._entries:
            raise DuplicatePseudonym(f"pseudonym {entry.pseudonym.hex()[:16]}... already recorded")
        self._entries[key] = entry
        if entry.block_ref is not None:
            self._by_block[entry.block_ref] = key

    def lookup(self, pseudonym: crypto.Pseudonym) -> KeyStoreEntry:
        try:
            return self._entries[pseudonym.digest]
        except KeyError:
            raise UnknownPseudonym(f"no entry for pseudonym {pseudonym.hex()[:16]}...") from None

    def lookup_by_block(self, block_ref: bytes) -> KeyStoreEntry:
        key = self._by_block.get(block_ref)
        if key is None or key not in self._entries:
            raise UnknownPseudonym(f"no entry for block {block_ref.hex()[:16]}...")
        return self._entries[key]

    def set_block_ref(self, pseudonym: crypto.Pseudonym, block_ref: bytes) -> None:
        entry = self.lookup(pseudonym)
        entry.block_ref = block_ref
        self._by_block[block_ref] = pseudonym.digest

    def contains(self, pseudonym: crypto.Pseudonym) -> bool:
        return pseudonym.digest in self._entries

    def list_own_pseudonyms(self, role: Optional[str] = None) -> list[crypto.Pseudonym]:
        """All non-erased pseudonyms, optionally filtered by role."""
        return [e.pseudonym for e in self._entries.values() if role is None or e.role == role]

    def entries(self) -> Iterator[KeyStoreEntry]:
        return iter(self._entries.values())

    def key_records(self) -> Iterator[tuple[crypto.Pseudonym, Optional[crypto.KeyPair], str, Optional[bytes]]]:
        """Every (pseudonym, key pair, role, block_ref) the store knows,
        including anonymous retained records of erased entries."""
        for e in self._entries.values():
            yield e.pseudonym, e.key_pair, e.role, e.block_ref
        for r in self._retained.values():
            yield r.pseudonym, r.key_pair, r.role, r.block_ref

    # -- erasure -------------------------------------------------------------

    def erase_link(self, pseudonym: crypto.Pseudonym, keep_keys: bool = False) -> None:
        """Irrecoverably drop the identity link and evidence for a pseudonym.

        By default the key pair is dropped too, making the on-chain copy
        undecryptable by anyone. With ``keep_keys`` the pair survives in an
        anonymous retained record (a per-user retention policy choice).
        """
        key = pseudonym.digest
        entry = self._entries.pop(key, None)
        if entry is None:
            raise UnknownPseudonym(f"no entry for pseudonym {pseudonym.hex()[:16]}...")
        self._retained[key] = RetainedKey(
            pseudonym=entry.pseudonym,
            key_pair=entry.key_pair if keep_keys else None,
            role=entry.role,
            derivation_index=entry.derivation_index,
            block_ref=entry.block_ref,
        )

    # -- backup shards -------------------------------------------------------

    def export_shards(self, k: int, m: int, rng: Optional[random.Random] = None) -> crypto.KeyShards:
        return crypto.split_master(self.master.seed, k, m, rng)

    # -- persistence ---------------------------------------------------------

    def serialize(self) -> bytes:
        out = bytearray()
        out += STORE_MAGIC
        out += struct.pack(">H", STORE_VERSION)
        out += struct.pack(">I", self.key_bits)
        out += self.master.seed
        out += struct.pack(">Q", self.master.creation_time)
        out += struct.pack(">Q", self._next_index)
        used = sorted(self._used_indices)
        out += struct.pack(">I", len(used))
        for idx in used:
            out += struct.pack(">Q", idx)
        out += struct.pack(">I", len(self._entries))
        for entry in self._entries.values():
            out += _encode_entry(entry)
        out += struct.pack(">I", len(self._retained))
        for retained in self._retained.values():
            out += _encode_retained(retained)
        return bytes(out)

    def save(self, path: str) -> None:
        """Atomic rewrite: the previous file never holds stale erased bytes."""
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.serialize())
        os.replace(tmp, path)

    @classmethod
    def deserialize(cls, data: bytes) -> "KeyStore":
        r = _Reader(data)
        if r.take(4) != STORE_MAGIC:
            raise KeyStoreError("not a key store file")
        version = r.u16()
        if version != STORE_VERSION:
            raise KeyStoreError(f"unsupported store version {version}")
        key_bits = r.u32()
        master = MasterKey(seed=r.take(32), creation_time=r.u64())
        store = cls(master, key_bits)
        store._next_index = r.u64()
        for _ in range(r.u32()):
            store._used_indices.add(r.u64())
        for _ in range(r.u32()):
            entry = _decode_entry(r)
            store._entries[entry.pseudonym.digest] = entry
            if entry.block_ref is not None:
                store._by_block[entry.block_ref] = entry.pseudonym.digest
        for _ in range(r.u32()):
            retained = _decode_retained(r)
            store._retained[retained.pseudonym.digest] = retained
        if not r.done():
            raise KeyStoreError("trailing bytes in store file")
        return store

    @classmethod
    def load(cls, path: str) -> "KeyStore":
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())


def restore_from_shards(shards: crypto.KeyShards) -> MasterKey:
    """Reconstruct a master key from threshold shards. Sub-keys re-derive
    from their stored indices; entry metadata is not recoverable."""
    return MasterKey(seed=crypto.recover_master(shards))


# ---------------------------------------------------------------------------
# wire helpers
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise KeyStoreError("truncated store file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def done(self) -> bool:
        return self.pos == len(self.data)


def _encode_keypair(kp: crypto.KeyPair) -> bytes:
    def big(x: int) -> bytes:
        b = x.to_bytes((x.bit_length() + 7) // 8 or 1, "big")
        return struct.pack(">I", len(b)) + b

    pk = kp.private_key
    return struct.pack(">I", kp.bits) + big(pk.n) + big(pk.e) + big(pk.d) + big(pk.p) + big(pk.q)


def _decode_keypair(r: _Reader) -> crypto.KeyPair:
    bits = r.u32()

    def big() -> int:
        return int.from_bytes(r.take(r.u32()), "big")

    n, e, d, p, q = big(), big(), big(), big(), big()
    import gmpy2

    priv = crypto.PrivateKey(
        n=n, e=e, d=d, p=p, q=q,
        d_p=d % (p - 1), d_q=d % (q - 1), q_inv=int(gmpy2.invert(q, p)),
    )
    return crypto.KeyPair(public_key=crypto.PublicKey(n=n, e=e), private_key=priv, bits=bits)


_F_KEYPAIR = 1
_F_BLOCK = 2
_F_COUNTERPARTY = 4
_F_EVIDENCE = 8


def _encode_entry(entry: KeyStoreEntry) -> bytes:
    flags = 0
    if entry.key_pair is not None:
        flags |= _F_KEYPAIR
    if entry.block_ref is not None:
        flags |= _F_BLOCK
    if entry.counterparty_identity is not None:
        flags |= _F_COUNTERPARTY
    if entry.evidence is not None:
        flags |= _F_EVIDENCE
    out = bytearray()
    out += entry.pseudonym.digest
    out += bytes([flags, _ROLE_CODES[entry.role]])
    out += struct.pack(">q", entry.derivation_index)
    if entry.key_pair is not None:
        out += _encode_keypair(entry.key_pair)
    if entry.block_ref is not None:
        out += entry.block_ref
    if entry.counterparty_identity is not None:
        cp = entry.counterparty_identity.encode("utf-8")
        out += struct.pack(">H", len(cp)) + cp
    if entry.evidence is not None:
        out += struct.pack(">I", len(entry.evidence)) + entry.evidence
    return bytes(out)


def _decode_entry(r: _Reader) -> KeyStoreEntry:
    pseudonym = crypto.Pseudonym(r.take(32))
    flags = r.u8()
    role = _ROLE_NAMES[r.u8()]
    derivation_index = r.i64()
    key_pair = _decode_keypair(r) if flags & _F_KEYPAIR else None
    block_ref = bytes(r.take(32)) if flags & _F_BLOCK else None
    counterparty = r.take(r.u16()).decode("utf-8") if flags & _F_COUNTERPARTY else None
    evidence = bytes(r.take(r.u32())) if flags & _F_EVIDENCE else None
    return KeyStoreEntry(
        pseudonym=pseudonym,
        key_pair=key_pair,
        role=role,
        derivation_index=derivation_index,
        block_ref=block_ref,
        counterparty_identity=counterparty,
        evidence=evidence,
    )


def _encode_retained(retained: RetainedKey) -> bytes:
    flags = 0
    if retained.key_pair is not None:
        flags |= _F_KEYPAIR
    if retained.block_ref is not None:
        flags |= _F_BLOCK
    out = bytearray()
    out += retained.pseudonym.digest
    out += bytes([flags, _ROLE_CODES[retained.role]])
    out += struct.pack(">q", retained.derivation_index)
    if retained.key_pair is not None:
        out += _encode_keypair(retained.key_pair)
    if retained.block_ref is not None:
        out += retained.block_ref
    return bytes(out)


def _decode_retained(r: _Reader) -> RetainedKey:
    pseudonym = crypto.Pseudonym(r.take(32))
    flags = r.u8()
    role = _ROLE_NAMES[r.u8()]
    derivation_index = r.i64()
    key_pair = _decode_keypair(r) if flags & _F_KEYPAIR else None
    block_ref = bytes(r.take(32)) if flags & _F_BLOCK else None
    return RetainedKey(
        pseudonym=pseudonym,
        key_pair=key_pair,
        role=role,
        derivation_index=derivation_index,
        block_ref=block_ref,
    )

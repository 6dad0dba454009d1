"""Primitive layer: RSA key pairs, signatures, hybrid encryption, pseudonym
derivation, ownership proofs, XOR secret splitting, threshold key shards, and
the sequential slow transform used by the usage exchange.

All randomized operations take an explicit ``rng`` (any object with
``randbytes``); passing a seeded ``random.Random`` makes every output byte
reproducible, which the simulation harness relies on. When ``rng`` is omitted,
operating-system randomness is used.
"""

from __future__ import annotations

import hashlib
import random
import secrets
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import gmpy2
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthenticationFailure,
    P3Error,
    ShardError,
    ShareError,
    UnsupportedKeySize,
)

SUPPORTED_KEY_BITS = (2048, 3072, 4096)
DEFAULT_KEY_BITS = 3072
DIGEST_SIZE = 32
PUBLIC_EXPONENT = 65537

DEFAULT_SLOW_ITERATIONS = 1 << 16

_HASH = hashlib.blake2s  # 256-bit digests everywhere


def digest(data: bytes) -> bytes:
    """32-byte BLAKE2s-256 digest."""
    return _HASH(data).digest()


def keyed_digest(key: bytes, data: bytes) -> bytes:
    return _HASH(data, key=key).digest()


def _system_rng() -> random.Random:
    return random.SystemRandom()


# ---------------------------------------------------------------------------
# RSA key pairs
# ---------------------------------------------------------------------------

def _int_bytes(x: int) -> bytes:
    return x.to_bytes((x.bit_length() + 7) // 8 or 1, "big")


@dataclass(frozen=True)
class PublicKey:
    """RSA public half in modulus/exponent form."""

    n: int
    e: int

    def canonical_bytes(self) -> bytes:
        """Length-prefixed big-endian modulus followed by length-prefixed
        big-endian exponent. This encoding is what gets hashed into a
        pseudonym, so it must never change."""
        nb = _int_bytes(self.n)
        eb = _int_bytes(self.e)
        return struct.pack(">I", len(nb)) + nb + struct.pack(">I", len(eb)) + eb

    @property
    def size_bytes(self) -> int:
        return (self.n.bit_length() + 7) // 8

    @classmethod
    def from_canonical(cls, data: bytes) -> "PublicKey":
        try:
            (nlen,) = struct.unpack_from(">I", data, 0)
            nb = data[4 : 4 + nlen]
            (elen,) = struct.unpack_from(">I", data, 4 + nlen)
            eb = data[8 + nlen : 8 + nlen + elen]
            if len(nb) != nlen or len(eb) != elen or len(data) != 8 + nlen + elen:
                raise ValueError("truncated")
        except (struct.error, ValueError) as exc:
            raise P3Error(f"malformed public key encoding: {exc}") from exc
        n = int.from_bytes(nb, "big")
        e = int.from_bytes(eb, "big")
        if n < 3 or e < 3:
            raise P3Error("malformed public key encoding: degenerate values")
        return cls(n=n, e=e)


@dataclass(frozen=True)
class PrivateKey:
    """RSA private half with CRT parameters for fast exponentiation."""

    n: int
    e: int
    d: int
    p: int
    q: int
    d_p: int = field(repr=False, default=0)
    d_q: int = field(repr=False, default=0)
    q_inv: int = field(repr=False, default=0)

    def _decrypt_int(self, c: int) -> int:
        # CRT: roughly 4x faster than a single pow(c, d, n).
        m1 = int(gmpy2.powmod(c, self.d_p, self.p))
        m2 = int(gmpy2.powmod(c, self.d_q, self.q))
        h = (self.q_inv * (m1 - m2)) % self.p
        return m2 + h * self.q


@dataclass(frozen=True)
class KeyPair:
    """An RSA key pair; in the usage protocol each pair is used for exactly
    one block side (its public-key digest is the transaction pseudonym)."""

    public_key: PublicKey
    private_key: PrivateKey
    bits: int


def _seed_stream(seed: bytes, context: bytes) -> Callable[[int], int]:
    """Deterministic integer source: BLAKE2s keyed by the seed, counter mode."""
    key = keyed_digest(seed, b"p3-keygen-" + context)
    counter = 0
    buf = b""

    def take(bits: int) -> int:
        nonlocal counter, buf
        nbytes = (bits + 7) // 8
        while len(buf) < nbytes:
            buf += _HASH(struct.pack(">Q", counter), key=key).digest()
            counter += 1
        out, buf = buf[:nbytes], buf[nbytes:]
        return int.from_bytes(out, "big")

    return take


def _gen_prime(take: Callable[[int], int], bits: int) -> int:
    while True:
        cand = take(bits)
        cand |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits:
            return p


@lru_cache(maxsize=8192)
def _keygen(bits: int, seed: bytes) -> KeyPair:
    take = _seed_stream(seed, b"rsa")
    e = PUBLIC_EXPONENT
    while True:
        p = _gen_prime(take, bits // 2)
        q = _gen_prime(take, bits // 2)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bits:
            continue
        phi = (p - 1) * (q - 1)
        if gmpy2.gcd(e, phi) != 1:
            continue
        d = int(gmpy2.invert(e, phi))
        priv = PrivateKey(
            n=n,
            e=e,
            d=d,
            p=p,
            q=q,
            d_p=d % (p - 1),
            d_q=d % (q - 1),
            q_inv=int(gmpy2.invert(q, p)),
        )
        return KeyPair(public_key=PublicKey(n=n, e=e), private_key=priv, bits=bits)


def generate_keypair(bits: int = DEFAULT_KEY_BITS, seed: Optional[bytes] = None) -> KeyPair:
    """Generate an RSA key pair.

    With ``seed`` (32 bytes) generation is fully deterministic: identical seeds
    yield byte-identical keys. Without it a fresh random seed is drawn.
    """
    if bits not in SUPPORTED_KEY_BITS:
        raise UnsupportedKeySize(f"unsupported key size {bits}; expected one of {SUPPORTED_KEY_BITS}")
    if seed is None:
        seed = secrets.token_bytes(32)
    if len(seed) != 32:
        raise P3Error("keypair seed must be exactly 32 bytes")
    return _keygen(bits, bytes(seed))


# ---------------------------------------------------------------------------
# Pseudonyms and ownership proofs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Pseudonym:
    """One-time transaction pseudonym: the 32-byte BLAKE2s-256 digest of a
    canonical public-key encoding."""

    digest: bytes

    def __post_init__(self):
        if len(self.digest) != DIGEST_SIZE:
            raise P3Error(f"pseudonym must be {DIGEST_SIZE} bytes, got {len(self.digest)}")

    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, s: str) -> "Pseudonym":
        return cls(bytes.fromhex(s))


ZERO_PSEUDONYM = Pseudonym(b"\x00" * DIGEST_SIZE)


def derive_pseudonym(public_key_bytes: bytes) -> Pseudonym:
    """Hash a canonical public-key encoding into its pseudonym."""
    if not public_key_bytes:
        raise P3Error("cannot derive a pseudonym from empty input")
    return Pseudonym(digest(public_key_bytes))


@dataclass(frozen=True)
class OwnershipProof:
    """Reveals a public key plus a signature over a verifier-chosen challenge;
    valid iff the key hashes to the claimed pseudonym."""

    public_key: bytes  # canonical encoding
    challenge: bytes
    signature: bytes


def prove_ownership(kp: KeyPair, challenge: bytes, rng: Optional[random.Random] = None) -> OwnershipProof:
    if not challenge:
        raise P3Error("ownership challenge must be non-empty")
    pub = kp.public_key.canonical_bytes()
    return OwnershipProof(public_key=pub, challenge=bytes(challenge), signature=sign(kp.private_key, challenge, rng))


def verify_ownership(p: Pseudonym, proof: OwnershipProof, challenge: bytes) -> bool:
    """True iff the proof's key hashes to ``p``, the challenge matches, and
    the signature verifies. Never raises on malformed input."""
    try:
        if not proof.public_key or proof.challenge != challenge:
            return False
        if derive_pseudonym(proof.public_key) != p:
            return False
        pub = PublicKey.from_canonical(proof.public_key)
        return verify(pub, challenge, proof.signature)
    except (P3Error, TypeError):
        return False


# ---------------------------------------------------------------------------
# Signatures: RSASSA-PSS with SHA-256 (RFC 8017), randomness injectable
# ---------------------------------------------------------------------------

def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    for counter in range((length + 31) // 32):
        out += hashlib.sha256(seed + struct.pack(">I", counter)).digest()
    return bytes(out[:length])


_PSS_SALT_LEN = 32


def sign(private_key: PrivateKey, message: bytes, rng: Optional[random.Random] = None) -> bytes:
    """Probabilistic-padding RSA signature over SHA-256(message)."""
    if rng is None:
        rng = _system_rng()
    em_bits = private_key.n.bit_length() - 1
    em_len = (em_bits + 7) // 8
    m_hash = hashlib.sha256(message).digest()
    salt = rng.randbytes(_PSS_SALT_LEN)
    m_prime = b"\x00" * 8 + m_hash + salt
    h = hashlib.sha256(m_prime).digest()
    ps_len = em_len - len(salt) - len(h) - 2
    db = b"\x00" * ps_len + b"\x01" + salt
    db_mask = _mgf1(h, em_len - len(h) - 1)
    masked_db = bytearray(a ^ b for a, b in zip(db, db_mask))
    masked_db[0] &= 0xFF >> (8 * em_len - em_bits)
    em = bytes(masked_db) + h + b"\xbc"
    s = private_key._decrypt_int(int.from_bytes(em, "big"))
    return s.to_bytes(private_key.n.bit_length() // 8, "big")


def verify(public_key: PublicKey, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid signature of ``message``."""
    try:
        n, e = public_key.n, public_key.e
        if len(signature) != n.bit_length() // 8:
            return False
        s = int.from_bytes(signature, "big")
        if s >= n:
            return False
        em_bits = n.bit_length() - 1
        em_len = (em_bits + 7) // 8
        em = int(gmpy2.powmod(s, e, n)).to_bytes(em_len, "big")
        if em[-1] != 0xBC:
            return False
        h = em[em_len - 33 : em_len - 1]
        masked_db = em[: em_len - 33]
        if masked_db[0] & ~(0xFF >> (8 * em_len - em_bits)):
            return False
        db_mask = _mgf1(h, len(masked_db))
        db = bytearray(a ^ b for a, b in zip(masked_db, db_mask))
        db[0] &= 0xFF >> (8 * em_len - em_bits)
        ps_len = em_len - 32 - _PSS_SALT_LEN - 2
        if any(db[:ps_len]) or db[ps_len] != 0x01:
            return False
        salt = bytes(db[ps_len + 1 :])
        m_hash = hashlib.sha256(message).digest()
        expected = hashlib.sha256(b"\x00" * 8 + m_hash + salt).digest()
        return expected == h
    except (OverflowError, ValueError, IndexError):
        return False


# ---------------------------------------------------------------------------
# Hybrid record encryption: RSAES-OAEP key wrap + AES-256-GCM seal
# ---------------------------------------------------------------------------
#
# Records can exceed the direct OAEP payload bound, so a fresh symmetric key
# is wrapped asymmetrically and the record sealed with an authenticated
# cipher. Randomized padding plus a fresh key per call means equal plaintexts
# never produce equal ciphertexts.

_OAEP_LHASH = hashlib.sha256(b"").digest()
_GCM_NONCE_LEN = 12


def _oaep_encrypt(public_key: PublicKey, message: bytes, rng: random.Random) -> bytes:
    k = public_key.size_bytes
    h_len = 32
    if len(message) > k - 2 * h_len - 2:
        raise P3Error("OAEP payload too large for modulus")
    ps = b"\x00" * (k - len(message) - 2 * h_len - 2)
    db = _OAEP_LHASH + ps + b"\x01" + message
    seed = rng.randbytes(h_len)
    masked_db = bytes(a ^ b for a, b in zip(db, _mgf1(seed, k - h_len - 1)))
    masked_seed = bytes(a ^ b for a, b in zip(seed, _mgf1(masked_db, h_len)))
    em = b"\x00" + masked_seed + masked_db
    c = int(gmpy2.powmod(int.from_bytes(em, "big"), public_key.e, public_key.n))
    return c.to_bytes(k, "big")


def _oaep_decrypt(private_key: PrivateKey, ciphertext: bytes) -> bytes:
    k = (private_key.n.bit_length() + 7) // 8
    h_len = 32
    if len(ciphertext) != k or k < 2 * h_len + 2:
        raise AuthenticationFailure("malformed wrapped key")
    c = int.from_bytes(ciphertext, "big")
    if c >= private_key.n:
        raise AuthenticationFailure("malformed wrapped key")
    em = private_key._decrypt_int(c).to_bytes(k, "big")
    masked_seed = em[1 : 1 + h_len]
    masked_db = em[1 + h_len :]
    seed = bytes(a ^ b for a, b in zip(masked_seed, _mgf1(masked_db, h_len)))
    db = bytes(a ^ b for a, b in zip(masked_db, _mgf1(seed, k - h_len - 1)))
    if em[0] != 0 or db[:h_len] != _OAEP_LHASH:
        raise AuthenticationFailure("OAEP decoding failed")
    sep = db.find(b"\x01", h_len)
    if sep < 0 or any(db[h_len:sep]):
        raise AuthenticationFailure("OAEP decoding failed")
    return db[sep + 1 :]


def encrypt_record(public_key: PublicKey, plaintext: bytes, rng: Optional[random.Random] = None) -> bytes:
    """Seal ``plaintext`` so that only the private-key holder can recover it."""
    if rng is None:
        rng = _system_rng()
    sym_key = rng.randbytes(32)
    wrapped = _oaep_encrypt(public_key, sym_key, rng)
    nonce = rng.randbytes(_GCM_NONCE_LEN)
    sealed = AESGCM(sym_key).encrypt(nonce, plaintext, None)
    return struct.pack(">I", len(wrapped)) + wrapped + nonce + sealed


def decrypt_record(private_key: PrivateKey, ciphertext: bytes) -> bytes:
    """Invert :func:`encrypt_record`; raises AuthenticationFailure on any
    tampering or wrong key."""
    try:
        (wlen,) = struct.unpack_from(">I", ciphertext, 0)
        wrapped = ciphertext[4 : 4 + wlen]
        nonce = ciphertext[4 + wlen : 4 + wlen + _GCM_NONCE_LEN]
        sealed = ciphertext[4 + wlen + _GCM_NONCE_LEN :]
        if len(wrapped) != wlen or len(nonce) != _GCM_NONCE_LEN or not sealed:
            raise AuthenticationFailure("truncated ciphertext")
        sym_key = _oaep_decrypt(private_key, wrapped)
        return AESGCM(sym_key).decrypt(nonce, sealed, None)
    except AuthenticationFailure:
        raise
    except Exception as exc:  # InvalidTag, struct.error, ...
        raise AuthenticationFailure(f"record decryption failed: {type(exc).__name__}") from exc


# ---------------------------------------------------------------------------
# XOR secret splitting (all n parts required)
# ---------------------------------------------------------------------------

_SHARE_BLOCK = 32


@dataclass(frozen=True)
class Shares:
    """n-out-of-n split of an encoded secret; XOR of all parts recovers it."""

    parts: tuple[bytes, ...]
    n: int


def _encode_secret(secret: bytes) -> bytes:
    body = struct.pack(">I", len(secret)) + secret
    pad = (-len(body)) % _SHARE_BLOCK
    return body + b"\x00" * pad


def split_secret(secret: bytes, n: int, rng: Optional[random.Random] = None) -> Shares:
    """Split into n equal-length parts; parts 1..n-1 are uniform random and
    part n completes the XOR."""
    if n < 1:
        raise ShareError(f"share count must be >= 1, got {n}")
    if rng is None:
        rng = _system_rng()
    encoded = _encode_secret(secret)
    parts = [rng.randbytes(len(encoded)) for _ in range(n - 1)]
    last = bytearray(encoded)
    for part in parts:
        for i, b in enumerate(part):
            last[i] ^= b
    parts.append(bytes(last))
    return Shares(parts=tuple(parts), n=n)


def compose_shares(shares: Shares) -> bytes:
    """XOR all parts back together and strip the length encoding."""
    if shares.n != len(shares.parts) or shares.n < 1:
        raise ShareError("share count mismatch")
    length = len(shares.parts[0])
    if any(len(p) != length for p in shares.parts):
        raise ShareError("mismatched share lengths")
    acc = bytearray(shares.parts[0])
    for part in shares.parts[1:]:
        for i, b in enumerate(part):
            acc[i] ^= b
    if len(acc) < 4:
        raise ShareError("composed value too short")
    (secret_len,) = struct.unpack_from(">I", acc, 0)
    if secret_len > len(acc) - 4:
        raise ShareError("composed length field out of range")
    return bytes(acc[4 : 4 + secret_len])


# ---------------------------------------------------------------------------
# Slow transform: invertible chain of keyed hash rounds over 32-byte blocks
# ---------------------------------------------------------------------------
#
# The forward direction is applied by a datum holder before splitting; the
# inverse is applied by the receiver after composing and is strictly
# sequential (every output block feeds the next mask), so its runtime cannot
# be shortcut below iterations * blocks hash calls.

_SLOW_KEY = digest(b"p3-slow-transform")


def _round_key(r: int) -> bytes:
    return keyed_digest(_SLOW_KEY, b"round" + struct.pack(">Q", r))


def _round_iv(key: bytes) -> bytes:
    return keyed_digest(key, b"iv")


def _untangle_round(data: bytes, r: int) -> bytes:
    # Mask chain follows the *input* blocks.
    key = _round_key(r)
    prev = _round_iv(key)
    out = bytearray(len(data))
    for off in range(0, len(data), _SHARE_BLOCK):
        block = data[off : off + _SHARE_BLOCK]
        mask = keyed_digest(key, prev)
        out[off : off + len(block)] = bytes(a ^ b for a, b in zip(block, mask))
        prev = block
    return bytes(out)


def _tangle_round(data: bytes, r: int) -> bytes:
    # Mask chain follows the *output* blocks: inherently sequential.
    key = _round_key(r)
    prev = _round_iv(key)
    out = bytearray(len(data))
    for off in range(0, len(data), _SHARE_BLOCK):
        block = data[off : off + _SHARE_BLOCK]
        mask = keyed_digest(key, prev)
        prev = bytes(a ^ b for a, b in zip(block, mask))
        out[off : off + len(block)] = prev
    return bytes(out)


def slow_transform(data: bytes, iterations: int = DEFAULT_SLOW_ITERATIONS) -> bytes:
    """Length-preserving bijection; runtime linear in ``iterations``."""
    if iterations < 1:
        raise P3Error(f"iterations must be >= 1, got {iterations}")
    for r in range(iterations):
        data = _untangle_round(data, r)
    return data


def slow_transform_inverse(data: bytes, iterations: int = DEFAULT_SLOW_ITERATIONS) -> bytes:
    """Inverse of :func:`slow_transform`; the sequential (receiver-side)
    direction."""
    if iterations < 1:
        raise P3Error(f"iterations must be >= 1, got {iterations}")
    for r in reversed(range(iterations)):
        data = _tangle_round(data, r)
    return data


# ---------------------------------------------------------------------------
# Threshold key shards: Shamir sharing over GF(256), per byte
# ---------------------------------------------------------------------------

def _gf_tables() -> tuple[list[int], list[int]]:
    exp = [0] * 512
    log = [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        x ^= 0x1B if x & 0x100 else 0
        x &= 0xFF
        x ^= exp[i]  # generator 3: multiply by (x + 1)
    for i in range(255, 512):
        exp[i] = exp[i - 255]
    return exp, log


_GF_EXP, _GF_LOG = _gf_tables()


def _gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _GF_EXP[_GF_LOG[a] + _GF_LOG[b]]


def _gf_inv(a: int) -> int:
    return _GF_EXP[255 - _GF_LOG[a]]


@dataclass(frozen=True)
class KeyShards:
    """Threshold split of a secret: any ``threshold`` distinct shards
    reconstruct it; fewer reveal nothing testable."""

    shards: tuple[tuple[int, bytes], ...]
    threshold: int
    total: int


def split_master(secret: bytes, k: int, m: int, rng: Optional[random.Random] = None) -> KeyShards:
    """Split ``secret`` into m shards with reconstruction threshold k."""
    if not (1 <= k <= m <= 255):
        raise ShardError(f"need 1 <= k <= m <= 255, got k={k} m={m}")
    if rng is None:
        rng = _system_rng()
    payloads = [bytearray(len(secret)) for _ in range(m)]
    for pos, byte in enumerate(secret):
        coeffs = [byte] + list(rng.randbytes(k - 1))
        for idx in range(1, m + 1):
            acc = 0
            for c in reversed(coeffs):  # Horner at x = idx
                acc = _gf_mul(acc, idx) ^ c
            payloads[idx - 1][pos] = acc
    shards = tuple((idx + 1, bytes(payloads[idx])) for idx in range(m))
    return KeyShards(shards=shards, threshold=k, total=m)


def recover_master(shards: KeyShards) -> bytes:
    """Reconstruct the secret from at least ``threshold`` distinct shards."""
    provided = list(shards.shards)
    if len(provided) < shards.threshold:
        raise ShardError(f"need {shards.threshold} shards, got {len(provided)}")
    indices = [idx for idx, _ in provided]
    if len(set(indices)) != len(indices):
        raise ShardError("duplicate shard indices")
    if any(not (1 <= idx <= 255) for idx in indices):
        raise ShardError("shard index out of range")
    use = provided[: shards.threshold]
    length = len(use[0][1])
    if any(len(p) != length for _, p in use):
        raise ShardError("mismatched shard payload lengths")
    secret = bytearray(length)
    for pos in range(length):
        acc = 0
        for i, (xi, pi) in enumerate(use):
            num, den = 1, 1
            for j, (xj, _) in enumerate(use):
                if i == j:
                    continue
                num = _gf_mul(num, xj)
                den = _gf_mul(den, xi ^ xj)
            acc ^= _gf_mul(pi[pos], _gf_mul(num, _gf_inv(den)))
        secret[pos] = acc
    return bytes(secret)

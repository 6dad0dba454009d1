"""Shared helpers for the test suite.

Real RSA key generation dominates test runtime, so tests draw deterministic
2048-bit pairs from a process-wide pool keyed by index. The pairs are real
keys (generated once, memoized by seed); only their reuse across tests is a
test-harness convenience.
"""

import struct

from p3log import crypto

_POOL_TAG = b"p3-test-keypool"


def pooled_keypair(index: int, bits: int = 2048) -> crypto.KeyPair:
    seed = crypto.keyed_digest(crypto.digest(_POOL_TAG), struct.pack(">Q", index))
    return crypto.generate_keypair(bits, seed)


class KeyPool:
    """Cycling provider of precomputed key pairs for protocol-heavy tests."""

    def __init__(self, size: int = 32, bits: int = 2048, tag: bytes = b"pool"):
        self._pairs = [
            crypto.generate_keypair(bits, crypto.keyed_digest(crypto.digest(_POOL_TAG + tag), struct.pack(">Q", i)))
            for i in range(size)
        ]
        self._next = 0

    def __call__(self, bits: int, rng) -> crypto.KeyPair:
        kp = self._pairs[self._next % len(self._pairs)]
        self._next += 1
        return kp

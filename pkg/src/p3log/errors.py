"""Exception types shared across the package."""


class P3Error(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedKeySize(P3Error):
    """Requested RSA modulus size is not one of the supported sizes."""


class AuthenticationFailure(P3Error):
    """Ciphertext failed integrity checking (tampering or wrong key)."""


class ShareError(P3Error):
    """Invalid share split/compose arguments or corrupt share material."""


class ShardError(P3Error):
    """Invalid threshold-shard arguments or insufficient shards."""


class KeyStoreError(P3Error):
    """Base class for key store errors."""


class DuplicatePseudonym(KeyStoreError):
    pass


class UnknownPseudonym(KeyStoreError):
    pass


class IndexReuse(KeyStoreError):
    pass


class LedgerError(P3Error):
    """Base class for chain errors."""


class InvalidBlock(LedgerError):
    pass


class ProtocolError(P3Error):
    """Base class for usage-protocol failures; aborts the session."""


class BadSignature(ProtocolError):
    pass


class WrongStep(ProtocolError):
    pass


class UnknownIdentity(ProtocolError):
    pass


class UnknownDatum(ProtocolError):
    pass


class CompositionError(ProtocolError):
    """Composed shares failed the embedded integrity check."""


class NoEvidence(P3Error):
    """An identity claim was requested but no evidence is held."""


class BadEnvelope(P3Error):
    """Wire envelope failed to parse or its signature failed to verify."""


class ScenarioError(P3Error):
    """Scenario script or simulation config is malformed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line

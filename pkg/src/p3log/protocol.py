"""The new-usage exchange between a data consumer and a data owner.

The datum is handed over as n signed shares with signed acknowledgments,
where n is drawn by the owner and never revealed before the end. A receiver
that stops acknowledging early holds shares that compose to nothing useful
(the composed value only checks out when all n shares are present, and the
composition runs through a deliberately slow sequential transform). After a
completed run the owner holds the consumer-signed final acknowledgment and
the consumer holds the full set of owner-signed share messages: mutual
non-repudiation evidence without a third party.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence, Union

from . import crypto
from .crypto import KeyPair, Pseudonym, PublicKey
from .encoding import MalformedBytes, Reader, Writer
from .errors import (
    BadSignature,
    CompositionError,
    P3Error,
    ProtocolError,
    UnknownDatum,
    UnknownIdentity,
    WrongStep,
)
from .ledger import FAKE_DATUM_ID, Block, BlockPayload, UsageRecord, mine_block

DEFAULT_N_MIN = 4
DEFAULT_N_MAX = 12
STEP_TIMEOUT_TICKS = 30

_CHECKSUM_KEY = crypto.digest(b"p3-datum-checksum")

KeyProvider = Callable[[int, random.Random], KeyPair]


def _default_key_provider(bits: int, rng: random.Random) -> KeyPair:
    return crypto.generate_keypair(bits, rng.randbytes(32))


@dataclass(frozen=True)
class Party:
    """A protocol participant: long-term name plus identity key pair."""

    party_id: str
    identity_key: KeyPair


@dataclass(frozen=True)
class OwnerPolicy:
    """Owner-side knobs: share-count range, slow-transform cost, key size."""

    n_min: int = DEFAULT_N_MIN
    n_max: int = DEFAULT_N_MAX
    slow_iterations: int = crypto.DEFAULT_SLOW_ITERATIONS
    key_bits: int = crypto.DEFAULT_KEY_BITS
    fake_datum_size: Optional[int] = None  # None: mimic a stored datum's size

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise P3Error("need 1 <= n_min <= n_max")


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UsageRequest:
    session_id: bytes
    consumer_id: str
    owner_id: str
    datum_id: bytes
    label_t: bytes
    purpose: str
    consumer_onetime_pub: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return (
            Writer()
            .raw(b"p3-req")
            .raw(self.session_id)
            .string(self.consumer_id)
            .string(self.owner_id)
            .raw(self.datum_id)
            .raw(self.label_t)
            .string(self.purpose)
            .bytes32(self.consumer_onetime_pub)
            .getvalue()
        )

    def encode(self) -> bytes:
        return Writer().raw(self.signed_bytes()).bytes32(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "UsageRequest":
        r = Reader(data)
        if r.raw(6) != b"p3-req":
            raise MalformedBytes("not a usage request")
        msg = cls(
            session_id=r.raw(16),
            consumer_id=r.string(),
            owner_id=r.string(),
            datum_id=r.raw(16),
            label_t=r.raw(16),
            purpose=r.string(),
            consumer_onetime_pub=r.bytes32(),
            signature=r.bytes32(),
        )
        r.expect_done()
        return msg


@dataclass(frozen=True)
class UsageAccept:
    session_id: bytes
    owner_id: str
    consumer_id: str
    label_t: bytes
    slow_iterations: int
    owner_onetime_pub: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return (
            Writer()
            .raw(b"p3-accept")
            .raw(self.session_id)
            .string(self.owner_id)
            .string(self.consumer_id)
            .raw(self.label_t)
            .u32(self.slow_iterations)
            .bytes32(self.owner_onetime_pub)
            .getvalue()
        )

    def encode(self) -> bytes:
        return Writer().raw(self.signed_bytes()).bytes32(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "UsageAccept":
        r = Reader(data)
        if r.raw(9) != b"p3-accept":
            raise MalformedBytes("not a usage accept")
        msg = cls(
            session_id=r.raw(16),
            owner_id=r.string(),
            consumer_id=r.string(),
            label_t=r.raw(16),
            slow_iterations=r.u32(),
            owner_onetime_pub=r.bytes32(),
            signature=r.bytes32(),
        )
        r.expect_done()
        return msg


@dataclass(frozen=True)
class ShareMessage:
    """Step x of the delivery: one share, signed by the owner's identity key
    over (step, share, both identities, label)."""

    x: int
    share: bytes
    owner_id: str
    consumer_id: str
    label_t: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return (
            Writer()
            .raw(b"p3-share")
            .u32(self.x)
            .bytes32(self.share)
            .string(self.owner_id)
            .string(self.consumer_id)
            .raw(self.label_t)
            .getvalue()
        )

    def encode(self) -> bytes:
        return Writer().raw(self.signed_bytes()).bytes32(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "ShareMessage":
        r = Reader(data)
        if r.raw(8) != b"p3-share":
            raise MalformedBytes("not a share message")
        msg = cls(
            x=r.u32(),
            share=r.bytes32(),
            owner_id=r.string(),
            consumer_id=r.string(),
            label_t=r.raw(16),
            signature=r.bytes32(),
        )
        r.expect_done()
        return msg


def share_digest(share: ShareMessage) -> bytes:
    """Digest an acknowledgment binds to: covers the owner's signature too."""
    return crypto.digest(share.encode())


@dataclass(frozen=True)
class AckMessage:
    x: int
    share_digest: bytes
    label_t: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return Writer().raw(b"p3-ack").u32(self.x).raw(self.share_digest).raw(self.label_t).getvalue()

    def encode(self) -> bytes:
        return Writer().raw(self.signed_bytes()).bytes32(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "AckMessage":
        r = Reader(data)
        if r.raw(6) != b"p3-ack":
            raise MalformedBytes("not an ack message")
        msg = cls(x=r.u32(), share_digest=r.raw(32), label_t=r.raw(16), signature=r.bytes32())
        r.expect_done()
        return msg


@dataclass(frozen=True)
class EndMarker:
    n: int
    label_t: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return Writer().raw(b"p3-end").u32(self.n).raw(self.label_t).getvalue()

    def encode(self) -> bytes:
        return Writer().raw(self.signed_bytes()).bytes32(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "EndMarker":
        r = Reader(data)
        if r.raw(6) != b"p3-end":
            raise MalformedBytes("not an end marker")
        msg = cls(n=r.u32(), label_t=r.raw(16), signature=r.bytes32())
        r.expect_done()
        return msg


# ---------------------------------------------------------------------------
# evidence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvidenceOwner:
    """Owner-held proof of delivery: the consumer's signed request plus its
    signed acknowledgment of the final share."""

    request: UsageRequest
    n: int
    final_share: ShareMessage
    ack_final: AckMessage


@dataclass(frozen=True)
class EvidenceConsumer:
    """Consumer-held proof of the exchange: the owner's signed acceptance and
    every owner-signed share message."""

    request: UsageRequest
    accept: UsageAccept
    shares: tuple[ShareMessage, ...]


Evidence = Union[EvidenceOwner, EvidenceConsumer]

_EV_OWNER = 1
_EV_CONSUMER = 2


def encode_evidence(evidence: Evidence) -> bytes:
    w = Writer()
    if isinstance(evidence, EvidenceOwner):
        w.u8(_EV_OWNER)
        w.bytes32(evidence.request.encode())
        w.u32(evidence.n)
        w.bytes32(evidence.final_share.encode())
        w.bytes32(evidence.ack_final.encode())
    else:
        w.u8(_EV_CONSUMER)
        w.bytes32(evidence.request.encode())
        w.bytes32(evidence.accept.encode())
        w.u32(len(evidence.shares))
        for share in evidence.shares:
            w.bytes32(share.encode())
    return w.getvalue()


def decode_evidence(data: bytes) -> Evidence:
    r = Reader(data)
    kind = r.u8()
    if kind == _EV_OWNER:
        request = UsageRequest.decode(r.bytes32())
        n = r.u32()
        final_share = ShareMessage.decode(r.bytes32())
        ack_final = AckMessage.decode(r.bytes32())
        r.expect_done()
        return EvidenceOwner(request=request, n=n, final_share=final_share, ack_final=ack_final)
    if kind == _EV_CONSUMER:
        request = UsageRequest.decode(r.bytes32())
        accept = UsageAccept.decode(r.bytes32())
        shares = tuple(ShareMessage.decode(r.bytes32()) for _ in range(r.u32()))
        r.expect_done()
        return EvidenceConsumer(request=request, accept=accept, shares=shares)
    raise MalformedBytes(f"unknown evidence kind {kind}")


def verify_evidence_owner(evidence: EvidenceOwner, consumer_pub: PublicKey) -> bool:
    """True iff the final acknowledgment is consumer-signed and binds the
    final share of this very session."""
    try:
        e = evidence
        if e.n < 1 or e.final_share.x != e.n or e.ack_final.x != e.n:
            return False
        if not (e.request.label_t == e.final_share.label_t == e.ack_final.label_t):
            return False
        if e.request.consumer_id != e.final_share.consumer_id:
            return False
        if e.request.owner_id != e.final_share.owner_id:
            return False
        if e.ack_final.share_digest != share_digest(e.final_share):
            return False
        if not crypto.verify(consumer_pub, e.request.signed_bytes(), e.request.signature):
            return False
        return crypto.verify(consumer_pub, e.ack_final.signed_bytes(), e.ack_final.signature)
    except (P3Error, AttributeError, TypeError):
        return False


def verify_evidence_consumer(
    evidence: EvidenceConsumer,
    owner_pub: PublicKey,
    expected_datum: Optional[bytes] = None,
) -> bool:
    """True iff every share is owner-signed, steps are contiguous, fields are
    consistent, and the shares compose (optionally to ``expected_datum``)."""
    try:
        e = evidence
        if not e.shares:
            return False
        if not crypto.verify(owner_pub, e.accept.signed_bytes(), e.accept.signature):
            return False
        if e.accept.label_t != e.request.label_t or e.accept.owner_id != e.request.owner_id:
            return False
        if e.accept.consumer_id != e.request.consumer_id:
            return False
        for step, share in enumerate(e.shares, start=1):
            if share.x != step:
                return False
            if share.label_t != e.request.label_t:
                return False
            if share.owner_id != e.request.owner_id or share.consumer_id != e.request.consumer_id:
                return False
            if not crypto.verify(owner_pub, share.signed_bytes(), share.signature):
                return False
        datum = attempt_composition([s.share for s in e.shares], e.accept.slow_iterations)
        if datum is None:
            return False
        return expected_datum is None or datum == expected_datum
    except (P3Error, AttributeError, TypeError):
        return False


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------

class SessionState(Enum):
    ACTIVE = "active"
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass
class ConsumerSession:
    session_id: bytes
    consumer_id: str
    owner_id: str
    datum_id: bytes
    label_t: bytes
    purpose: str
    onetime: KeyPair
    owner_identity_pub: PublicKey
    rng: random.Random
    identity_key: KeyPair
    fake: bool
    request: UsageRequest
    accept: Optional[UsageAccept] = None
    shares: list[ShareMessage] = field(default_factory=list)
    state: SessionState = SessionState.ACTIVE
    # The receiver never learns the share count before completion; it only
    # tracks how far it has come.

    @property
    def own_pseudonym(self) -> Pseudonym:
        return crypto.derive_pseudonym(self.onetime.public_key.canonical_bytes())

    def abort(self) -> None:
        self.state = SessionState.ABORTED


@dataclass
class OwnerSession:
    session_id: bytes
    owner_id: str
    consumer_id: str
    datum_id: bytes
    label_t: bytes
    purpose: str
    n: int
    onetime: KeyPair
    consumer_onetime_pub: bytes
    consumer_identity_pub: PublicKey
    rng: random.Random
    identity_key: KeyPair
    fake: bool
    request: UsageRequest
    accept: UsageAccept
    prepared_shares: tuple[bytes, ...]
    sent_shares: list[ShareMessage] = field(default_factory=list)
    acks: list[AckMessage] = field(default_factory=list)
    state: SessionState = SessionState.ACTIVE

    @property
    def x(self) -> int:
        """Steps sent so far."""
        return len(self.sent_shares)

    @property
    def own_pseudonym(self) -> Pseudonym:
        return crypto.derive_pseudonym(self.onetime.public_key.canonical_bytes())

    @property
    def consumer_pseudonym(self) -> Pseudonym:
        return crypto.derive_pseudonym(self.consumer_onetime_pub)

    def abort(self) -> None:
        self.state = SessionState.ABORTED


@dataclass(frozen=True)
class Completed:
    """Terminal owner-step result: the signed end marker plus the owner's
    non-repudiation evidence."""

    end_marker: EndMarker
    evidence: EvidenceOwner


# ---------------------------------------------------------------------------
# protocol steps
# ---------------------------------------------------------------------------

def consumer_start(
    party: Party,
    owner_id: str,
    datum_id: bytes,
    owner_identity_pub: PublicKey,
    rng: random.Random,
    purpose: str = "",
    key_bits: int = crypto.DEFAULT_KEY_BITS,
    key_provider: Optional[KeyProvider] = None,
) -> tuple[UsageRequest, ConsumerSession]:
    """Open a session: fresh label, fresh one-time key, signed request."""
    provider = key_provider or _default_key_provider
    onetime = provider(key_bits, rng)
    session_id = rng.randbytes(16)
    label_t = rng.randbytes(16)
    request = UsageRequest(
        session_id=session_id,
        consumer_id=party.party_id,
        owner_id=owner_id,
        datum_id=bytes(datum_id),
        label_t=label_t,
        purpose=purpose,
        consumer_onetime_pub=onetime.public_key.canonical_bytes(),
    )
    request = replace(request, signature=crypto.sign(party.identity_key.private_key, request.signed_bytes(), rng))
    session = ConsumerSession(
        session_id=session_id,
        consumer_id=party.party_id,
        owner_id=owner_id,
        datum_id=bytes(datum_id),
        label_t=label_t,
        purpose=purpose,
        onetime=onetime,
        owner_identity_pub=owner_identity_pub,
        rng=rng,
        identity_key=party.identity_key,
        fake=datum_id == FAKE_DATUM_ID,
        request=request,
    )
    return request, session


def _prepare_shares(datum: bytes, n: int, slow_iterations: int, rng: random.Random) -> tuple[bytes, ...]:
    payload = crypto.keyed_digest(_CHECKSUM_KEY, datum) + datum
    transformed = crypto.slow_transform(payload, slow_iterations)
    return crypto.split_secret(transformed, n, rng).parts


def attempt_composition(shares: Sequence[bytes], slow_iterations: int) -> Optional[bytes]:
    """Compose share payloads and check the embedded integrity prefix.

    Returns the datum, or None when the share set is incomplete or corrupt.
    A receiver can call this after every share; it only ever succeeds once
    all shares are present, and each attempt pays the full inverse-transform
    cost."""
    if not shares:
        return None
    try:
        composed = crypto.compose_shares(crypto.Shares(parts=tuple(shares), n=len(shares)))
        payload = crypto.slow_transform_inverse(composed, slow_iterations)
    except P3Error:
        return None
    if len(payload) < 32:
        return None
    checksum, datum = payload[:32], payload[32:]
    if crypto.keyed_digest(_CHECKSUM_KEY, datum) != checksum:
        return None
    return datum


def owner_accept(
    party: Party,
    request: UsageRequest,
    consumer_identity_pub: Optional[PublicKey],
    datum_store: Mapping[bytes, bytes],
    policy: OwnerPolicy,
    rng: random.Random,
    key_provider: Optional[KeyProvider] = None,
) -> tuple[UsageAccept, OwnerSession]:
    """Accept a usage request: draw n, generate the one-time key, precompute
    the shares, and answer with the signed acceptance."""
    if consumer_identity_pub is None:
        raise UnknownIdentity(f"no pinned key for {request.consumer_id!r}")
    if not crypto.verify(consumer_identity_pub, request.signed_bytes(), request.signature):
        raise BadSignature("request signature invalid")
    fake = request.datum_id == FAKE_DATUM_ID
    if fake:
        size = policy.fake_datum_size
        if size is None:
            sizes = sorted({len(v) for v in datum_store.values()}) or [64]
            size = sizes[rng.randrange(len(sizes))]
        datum = rng.randbytes(size)
    else:
        if request.datum_id not in datum_store:
            raise UnknownDatum(f"no datum {request.datum_id.hex()}")
        datum = datum_store[request.datum_id]
    n = rng.randint(policy.n_min, policy.n_max)
    provider = key_provider or _default_key_provider
    onetime = provider(policy.key_bits, rng)
    accept = UsageAccept(
        session_id=request.session_id,
        owner_id=party.party_id,
        consumer_id=request.consumer_id,
        label_t=request.label_t,
        slow_iterations=policy.slow_iterations,
        owner_onetime_pub=onetime.public_key.canonical_bytes(),
    )
    accept = replace(accept, signature=crypto.sign(party.identity_key.private_key, accept.signed_bytes(), rng))
    session = OwnerSession(
        session_id=request.session_id,
        owner_id=party.party_id,
        consumer_id=request.consumer_id,
        datum_id=request.datum_id,
        label_t=request.label_t,
        purpose=request.purpose,
        n=n,
        onetime=onetime,
        consumer_onetime_pub=request.consumer_onetime_pub,
        consumer_identity_pub=consumer_identity_pub,
        rng=rng,
        identity_key=party.identity_key,
        fake=fake,
        request=request,
        accept=accept,
        prepared_shares=_prepare_shares(datum, n, policy.slow_iterations, rng),
    )
    return accept, session


def consumer_on_accept(session: ConsumerSession, accept: UsageAccept) -> None:
    """Record the owner's one-time key; verifies the acceptance signature."""
    if session.state is not SessionState.ACTIVE or session.accept is not None:
        raise WrongStep("acceptance not expected now")
    if accept.label_t != session.label_t or accept.owner_id != session.owner_id:
        session.abort()
        raise WrongStep("acceptance does not match session")
    if not crypto.verify(session.owner_identity_pub, accept.signed_bytes(), accept.signature):
        session.abort()
        raise BadSignature("acceptance signature invalid")
    session.accept = accept


def owner_step(session: OwnerSession, ack: Optional[AckMessage]) -> Union[ShareMessage, Completed]:
    """Advance the owner: emit the next share, or finish after a valid final
    acknowledgment. Any invalid acknowledgment aborts the session."""
    if session.state is not SessionState.ACTIVE:
        raise ProtocolError(f"session is {session.state.value}")
    if ack is None:
        if session.x != 0:
            session.abort()
            raise WrongStep("start event after shares were sent")
    else:
        if session.x == 0:
            session.abort()
            raise WrongStep("acknowledgment before any share")
        if ack.x != session.x:
            session.abort()
            raise WrongStep(f"expected acknowledgment of step {session.x}, got {ack.x}")
        if ack.label_t != session.label_t:
            session.abort()
            raise WrongStep("acknowledgment label mismatch")
        if ack.share_digest != share_digest(session.sent_shares[-1]):
            session.abort()
            raise WrongStep("acknowledgment digest mismatch")
        if not crypto.verify(session.consumer_identity_pub, ack.signed_bytes(), ack.signature):
            session.abort()
            raise BadSignature("acknowledgment signature invalid")
        session.acks.append(ack)
        if session.x == session.n:
            end = EndMarker(n=session.n, label_t=session.label_t)
            end = replace(end, signature=crypto.sign(session.identity_key.private_key, end.signed_bytes(), session.rng))
            session.state = SessionState.COMPLETED
            evidence = EvidenceOwner(
                request=session.request,
                n=session.n,
                final_share=session.sent_shares[-1],
                ack_final=ack,
            )
            return Completed(end_marker=end, evidence=evidence)
    x = session.x + 1
    share = ShareMessage(
        x=x,
        share=session.prepared_shares[x - 1],
        owner_id=session.owner_id,
        consumer_id=session.consumer_id,
        label_t=session.label_t,
    )
    share = replace(share, signature=crypto.sign(session.identity_key.private_key, share.signed_bytes(), session.rng))
    session.sent_shares.append(share)
    return share


def consumer_step(session: ConsumerSession, share: ShareMessage) -> AckMessage:
    """Store a verified share and answer with a signed acknowledgment."""
    if session.state is not SessionState.ACTIVE:
        raise ProtocolError(f"session is {session.state.value}")
    if session.accept is None:
        session.abort()
        raise WrongStep("share before acceptance")
    if share.x != len(session.shares) + 1:
        session.abort()
        raise WrongStep(f"expected step {len(session.shares) + 1}, got {share.x}")
    if share.label_t != session.label_t or share.owner_id != session.owner_id or share.consumer_id != session.consumer_id:
        session.abort()
        raise WrongStep("share does not match session")
    if not crypto.verify(session.owner_identity_pub, share.signed_bytes(), share.signature):
        session.abort()
        raise BadSignature("share signature invalid")
    session.shares.append(share)
    ack = AckMessage(x=share.x, share_digest=share_digest(share), label_t=session.label_t)
    ack = replace(ack, signature=crypto.sign(session.identity_key.private_key, ack.signed_bytes(), session.rng))
    return ack


def consumer_finalize(session: ConsumerSession, end_marker: EndMarker) -> tuple[bytes, EvidenceConsumer]:
    """Compose the datum after the signed end marker and assemble the
    consumer's evidence."""
    if session.state is not SessionState.ACTIVE or session.accept is None:
        raise ProtocolError("session not ready to finalize")
    if end_marker.label_t != session.label_t:
        session.abort()
        raise WrongStep("end marker label mismatch")
    if not crypto.verify(session.owner_identity_pub, end_marker.signed_bytes(), end_marker.signature):
        session.abort()
        raise BadSignature("end marker signature invalid")
    if end_marker.n != len(session.shares):
        session.abort()
        raise CompositionError(f"owner announced {end_marker.n} shares, received {len(session.shares)}")
    datum = attempt_composition([s.share for s in session.shares], session.accept.slow_iterations)
    if datum is None:
        session.abort()
        raise CompositionError("composed shares failed the integrity check")
    session.state = SessionState.COMPLETED
    evidence = EvidenceConsumer(request=session.request, accept=session.accept, shares=tuple(session.shares))
    return datum, evidence


def build_block(
    session: OwnerSession,
    usage: UsageRecord,
    prev_hash: bytes,
    difficulty: int,
    rng: random.Random,
) -> Block:
    """Assemble and mine the block for a completed session: both pseudonyms
    plus the identical record encrypted once per one-time key."""
    if session.state is not SessionState.COMPLETED:
        raise ProtocolError("session not completed")
    if session.fake or usage.datum_id == FAKE_DATUM_ID:
        raise ProtocolError("decoy sessions never produce blocks")
    record_bytes = usage.encode()
    consumer_pub = PublicKey.from_canonical(session.consumer_onetime_pub)
    payload = BlockPayload(
        consumer_pseudonym=session.consumer_pseudonym,
        owner_pseudonym=session.own_pseudonym,
        enc_consumer=crypto.encrypt_record(consumer_pub, record_bytes, rng),
        enc_owner=crypto.encrypt_record(session.onetime.public_key, record_bytes, rng),
    )
    return mine_block(prev_hash, payload, difficulty, rng)


# ---------------------------------------------------------------------------
# cheating harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheatOutcome:
    n: int
    stop_at: int
    got_datum: bool
    owner_has_final_ack: bool
    # populated when the session completed honestly (stop_at > n)
    owner_evidence: Optional[EvidenceOwner] = None
    consumer_evidence: Optional[EvidenceConsumer] = None


def run_cheating_session(
    consumer: Party,
    owner: Party,
    datum_id: bytes,
    datum_store: Mapping[bytes, bytes],
    stop_at: int,
    policy: OwnerPolicy,
    rng: random.Random,
    key_provider: Optional[KeyProvider] = None,
) -> CheatOutcome:
    """Test-harness consumer that stops acknowledging after receiving share
    ``stop_at`` and then attempts composition of whatever it holds."""
    request, csession = consumer_start(
        consumer,
        owner.party_id,
        datum_id,
        owner.identity_key.public_key,
        rng,
        key_bits=policy.key_bits,
        key_provider=key_provider,
    )
    accept, osession = owner_accept(
        owner, request, consumer.identity_key.public_key, datum_store, policy, rng, key_provider
    )
    consumer_on_accept(csession, accept)
    event: Optional[AckMessage] = None
    completed: Optional[Completed] = None
    while True:
        result = owner_step(osession, event)
        if isinstance(result, Completed):
            completed = result
            break
        share = result
        if share.x >= stop_at:
            # Receive silently: no acknowledgment goes back.
            csession.shares.append(share)
            break
        event = consumer_step(csession, share)
    if completed is not None:
        datum, consumer_evidence = consumer_finalize(csession, completed.end_marker)
        got_datum = True
    else:
        consumer_evidence = None
        got_datum = attempt_composition([s.share for s in csession.shares], policy.slow_iterations) is not None
    return CheatOutcome(
        n=osession.n,
        stop_at=stop_at,
        got_datum=got_datum,
        owner_has_final_ack=completed is not None and len(osession.acks) == osession.n,
        owner_evidence=completed.evidence if completed is not None else None,
        consumer_evidence=consumer_evidence,
    )

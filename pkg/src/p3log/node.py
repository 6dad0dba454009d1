"""A network participant: serves usage requests for its datums, requests
usages from peers, publishes mined blocks with a randomized delay, emits
decoy sessions, and processes erasure requests by deleting local identity
links.

Nodes are driven by a scheduler: every handler takes the current tick and
returns effects (sends and timers) instead of doing I/O, which keeps a whole
network deterministic under a seeded simulation.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from . import crypto, keystore, ledger, protocol, wire
from .crypto import Pseudonym, PublicKey
from .encoding import MalformedBytes, Reader, Writer
from .errors import (
    BadEnvelope,
    NoEvidence,
    P3Error,
    ProtocolError,
    UnknownPseudonym,
)

PUBLISH_DELAY = "delay"
PUBLISH_WAIT_FOR_K = "wait-for-k"


def datum_id_for(identity_id: str, ordinal: int) -> bytes:
    """Deterministic id of a node's ordinal-th provisioned datum; computable
    by anyone who knows the owner's name (scenario convenience)."""
    return crypto.digest(b"datum:" + identity_id.encode("utf-8") + b":%d" % ordinal)[:16]


@dataclass
class NodeConfig:
    identity_id: str
    key_bits: int = crypto.DEFAULT_KEY_BITS
    n_min: int = protocol.DEFAULT_N_MIN
    n_max: int = protocol.DEFAULT_N_MAX
    difficulty: int = ledger.DEFAULT_DIFFICULTY
    delta_max: int = 0
    wait_for_k: int = 0
    fake_rate: float = 0.0
    slow_iterations: int = crypto.DEFAULT_SLOW_ITERATIONS
    adversarial: bool = False
    erase_keep_keys: bool = False
    datum_count: int = 0
    datum_size: int = 64

    _BOOL_KEYS = ("adversarial", "erase_keep_keys")
    _INT_KEYS = (
        "key_bits", "n_min", "n_max", "difficulty", "delta_max",
        "wait_for_k", "slow_iterations", "datum_count", "datum_size",
    )

    @classmethod
    def from_mapping(cls, identity_id: str, raw: dict) -> "NodeConfig":
        kwargs: dict = {"identity_id": identity_id}
        for key, value in raw.items():
            if key == "identity_id":
                kwargs["identity_id"] = str(value)
            elif key in cls._INT_KEYS:
                kwargs[key] = int(value)
            elif key == "fake_rate":
                kwargs[key] = float(value)
            elif key in cls._BOOL_KEYS:
                kwargs[key] = str(value).strip().lower() in ("1", "true", "yes", "on")
            else:
                raise P3Error(f"unknown node config key {key!r}")
        return cls(**kwargs)

    @property
    def publish_policy(self) -> str:
        return PUBLISH_WAIT_FOR_K if self.wait_for_k > 0 else PUBLISH_DELAY


@dataclass
class NodeIdentity:
    """Long-term name, identity key pair, and pinned peer keys (the
    web-of-trust stand-in: unknown senders are simply rejected)."""

    identity_id: str
    identity_keypair: crypto.KeyPair
    pinned_peers: dict[str, PublicKey] = field(default_factory=dict)

    def pin_peer(self, peer_id: str, public_key: PublicKey) -> None:
        existing = self.pinned_peers.get(peer_id)
        if existing is not None and existing != public_key:
            raise P3Error(f"peer {peer_id!r} already pinned with a different key")
        self.pinned_peers[peer_id] = public_key

    def peer_key(self, peer_id: str) -> Optional[PublicKey]:
        return self.pinned_peers.get(peer_id)


# ---------------------------------------------------------------------------
# effects returned by handlers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    dst: str
    envelope: wire.Envelope


@dataclass(frozen=True)
class Timer:
    at: int
    tag: str


Effect = Union[Send, Timer]


# ---------------------------------------------------------------------------
# identity claims (the self-incrimination surface)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityClaim:
    """Public assertion that a pseudonym belongs to a named counterparty,
    backed by exchange evidence. By construction the evidence carries the
    claimant's own signatures, so publishing it de-anonymizes the claimant
    as well."""

    claimant_id: str
    counterparty_id: str
    pseudonym: Pseudonym
    claimant_identity_pub: bytes
    counterparty_identity_pub: bytes
    evidence: Optional[protocol.EvidenceOwner]  # None: bare assertion


def verify_identity_claim(claim: IdentityClaim) -> tuple[bool, list[str]]:
    """Check a claim; returns (accepted, identities exposed by signature).

    Bare assertions are never accepted: without verify-true evidence there is
    no technical relationship between a pseudonym and an identity.
    """
    if claim.evidence is None:
        return False, []
    try:
        counterparty_pub = PublicKey.from_canonical(claim.counterparty_identity_pub)
        claimant_pub = PublicKey.from_canonical(claim.claimant_identity_pub)
    except P3Error:
        return False, []
    ev = claim.evidence
    if not protocol.verify_evidence_owner(ev, counterparty_pub):
        return False, []
    if ev.request.consumer_id != claim.counterparty_id or ev.request.owner_id != claim.claimant_id:
        return False, []
    if crypto.derive_pseudonym(ev.request.consumer_onetime_pub) != claim.pseudonym:
        return False, []
    exposed = [claim.counterparty_id]
    # The claimant's own signature sits on the final share inside the claim.
    if crypto.verify(claimant_pub, ev.final_share.signed_bytes(), ev.final_share.signature):
        exposed.append(claim.claimant_id)
    return True, exposed


# ---------------------------------------------------------------------------
# erasure wire bodies
# ---------------------------------------------------------------------------

_ERASE_INIT = 0
_ERASE_PROOF = 1
_ERASE_CHALLENGE = 0
_ERASE_RESULT = 1

SCOPE_IDENTITY_LINK = 1
SCOPE_EVIDENCE = 2
SCOPE_ALL = SCOPE_IDENTITY_LINK | SCOPE_EVIDENCE


@dataclass(frozen=True)
class ErasureRequest:
    """What a data subject sends: their one-time pseudonym, the block it
    appears in, and (in the proof phase) ownership proof over the verifier's
    challenge."""

    target_pseudonym: Pseudonym
    block_ref: bytes
    scope: int = SCOPE_ALL
    proof: Optional[crypto.OwnershipProof] = None


def _encode_erase_req(phase: int, req: ErasureRequest) -> bytes:
    w = Writer().u8(phase).raw(req.target_pseudonym.digest).raw(req.block_ref).u8(req.scope)
    if phase == _ERASE_PROOF:
        assert req.proof is not None
        w.bytes32(req.proof.challenge).bytes32(req.proof.public_key).bytes32(req.proof.signature)
    return w.getvalue()


def _decode_erase_req(body: bytes) -> tuple[int, ErasureRequest]:
    r = Reader(body)
    phase = r.u8()
    target = Pseudonym(r.raw(32))
    block_ref = r.raw(32)
    scope = r.u8()
    proof = None
    if phase == _ERASE_PROOF:
        challenge = r.bytes32()
        public_key = r.bytes32()
        signature = r.bytes32()
        proof = crypto.OwnershipProof(public_key=public_key, challenge=challenge, signature=signature)
    r.expect_done()
    return phase, ErasureRequest(target_pseudonym=target, block_ref=block_ref, scope=scope, proof=proof)


# ---------------------------------------------------------------------------
# the node
# ---------------------------------------------------------------------------

@dataclass
class CompletedRequest:
    session_id: bytes
    owner_id: str
    datum_id: bytes
    datum: bytes
    pseudonym: Pseudonym
    fake: bool


@dataclass
class _PendingBlock:
    session_id: bytes
    record: ledger.UsageRecord
    session: protocol.OwnerSession
    publish_after_foreign: Optional[int] = None  # wait-for-k threshold


class Node:
    def __init__(self, config: NodeConfig, master_seed: bytes, rng: random.Random):
        self.config = config
        self.rng = rng
        self.store = keystore.KeyStore(keystore.MasterKey(seed=master_seed), key_bits=config.key_bits)
        self.identity = NodeIdentity(
            identity_id=config.identity_id,
            identity_keypair=self.store.identity_keypair(),
        )
        self.chain = ledger.Chain(difficulty=config.difficulty)
        self.datums: dict[bytes, bytes] = {}
        self.neighbors: list[str] = []
        self.consumer_sessions: dict[bytes, protocol.ConsumerSession] = {}
        self.owner_sessions: dict[bytes, protocol.OwnerSession] = {}
        self.pending_blocks: dict[bytes, _PendingBlock] = {}
        self.completed_requests: list[CompletedRequest] = []
        self.erase_outcomes: list[dict] = []
        self._session_index: dict[bytes, int] = {}  # session -> sub-key index
        self._pending_erase_out: dict[bytes, ErasureRequest] = {}
        self._pending_erase_in: dict[bytes, bytes] = {}  # session -> challenge
        self._seen_tips: set[bytes] = set()
        self._counted_tips: set[bytes] = set()
        self._foreign_blocks = 0
        self._fake_gen = 0
        self._sent_purposes: list[str] = []
        self.on_truth: Optional[Callable[[dict], None]] = None

    # -- setup ---------------------------------------------------------------

    @property
    def identity_id(self) -> str:
        return self.config.identity_id

    def add_datum(self, datum_id: bytes, content: bytes) -> None:
        if datum_id == ledger.FAKE_DATUM_ID:
            raise P3Error("the all-zero datum id is reserved for decoy sessions")
        self.datums[datum_id] = content

    def provision_datums(self, count: int, size: int) -> list[bytes]:
        """Deterministic per-node datum ids for scripted scenarios."""
        ids = []
        for index in range(count):
            datum_id = datum_id_for(self.identity_id, index)
            self.add_datum(datum_id, self.rng.randbytes(size))
            ids.append(datum_id)
        return ids

    def owner_policy(self) -> protocol.OwnerPolicy:
        return protocol.OwnerPolicy(
            n_min=self.config.n_min,
            n_max=self.config.n_max,
            slow_iterations=self.config.slow_iterations,
            key_bits=self.config.key_bits,
        )

    def start(self, now: int) -> list[Effect]:
        effects: list[Effect] = []
        if self.config.fake_rate > 0:
            effects.append(Timer(at=now + self._fake_interval(), tag=f"fake:{self._fake_gen}"))
        return effects

    def restart(self, now: int) -> list[Effect]:
        """Resume after a crash; stale timers from before are ignored."""
        self._fake_gen += 1
        return self.start(now)

    def _fake_interval(self) -> int:
        return max(1, round(self.rng.expovariate(self.config.fake_rate)))

    def _emit(self, event: dict) -> None:
        if self.on_truth is not None:
            self.on_truth(event)

    def _envelope(self, msg_type: int, session_id: bytes, body: bytes) -> wire.Envelope:
        return wire.pack_envelope(
            self.identity_id, msg_type, session_id, body, self.identity.identity_keypair, self.rng
        )

    def _onetime_provider(self):
        allocated: dict[str, int] = {}

        def provider(bits: int, rng: random.Random) -> crypto.KeyPair:
            kp, index = self.store.allocate_onetime()
            allocated["index"] = index
            return kp

        return provider, allocated

    # -- consumer side ---------------------------------------------------------

    def begin_request(self, owner_id: str, datum_id: bytes, now: int, purpose: str = "") -> list[Effect]:
        owner_pub = self.identity.peer_key(owner_id)
        if owner_pub is None:
            raise P3Error(f"owner {owner_id!r} is not pinned")
        provider, allocated = self._onetime_provider()
        request, session = protocol.consumer_start(
            protocol.Party(self.identity_id, self.identity.identity_keypair),
            owner_id,
            datum_id,
            owner_pub,
            self.rng,
            purpose=purpose,
            key_bits=self.config.key_bits,
            key_provider=provider,
        )
        self.consumer_sessions[session.session_id] = session
        self._session_index[session.session_id] = allocated["index"]
        if datum_id != ledger.FAKE_DATUM_ID:
            self._sent_purposes.append(purpose)
        self._emit({
            "kind": "session-start", "session_id": session.session_id.hex(),
            "consumer": self.identity_id, "owner": owner_id,
            "fake": session.fake, "at": now,
        })
        return [
            Send(dst=owner_id, envelope=self._envelope(wire.MSG_REQ, session.session_id, request.encode())),
            Timer(at=now + protocol.STEP_TIMEOUT_TICKS, tag=f"ct:{session.session_id.hex()}:0"),
        ]

    # -- inbound dispatch ------------------------------------------------------

    def on_envelope(self, env: wire.Envelope, now: int) -> list[Effect]:
        peer_pub = self.identity.peer_key(env.sender_id)
        if peer_pub is None:
            return []  # unpinned sender: rejected before anything else
        if not wire.verify_envelope(env, peer_pub):
            return []
        handler = {
            wire.MSG_REQ: self._on_req,
            wire.MSG_ACCEPT: self._on_accept,
            wire.MSG_SHARE: self._on_share,
            wire.MSG_ACK: self._on_ack,
            wire.MSG_END: self._on_end,
            wire.MSG_BLOCK: self._on_block,
            wire.MSG_ERASE_REQ: self._on_erase_req,
            wire.MSG_ERASE_ACK: self._on_erase_ack,
        }[env.msg_type]
        try:
            return handler(env, peer_pub, now)
        except (ProtocolError, MalformedBytes, P3Error):
            # Misbehaving peer: the session (if any) is dead; stay silent.
            self.consumer_sessions.pop(env.session_id, None)
            self.owner_sessions.pop(env.session_id, None)
            return []

    def _on_req(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        request = protocol.UsageRequest.decode(env.body)
        if request.consumer_id != env.sender_id or request.owner_id != self.identity_id:
            return []
        provider, allocated = self._onetime_provider()
        accept, session = protocol.owner_accept(
            protocol.Party(self.identity_id, self.identity.identity_keypair),
            request,
            peer_pub,
            self.datums,
            self.owner_policy(),
            self.rng,
            key_provider=provider,
        )
        self.owner_sessions[session.session_id] = session
        self._session_index[session.session_id] = allocated["index"]
        first_share = protocol.owner_step(session, None)
        assert isinstance(first_share, protocol.ShareMessage)
        return [
            Send(dst=env.sender_id, envelope=self._envelope(wire.MSG_ACCEPT, session.session_id, accept.encode())),
            Send(dst=env.sender_id, envelope=self._envelope(wire.MSG_SHARE, session.session_id, first_share.encode())),
            Timer(at=now + protocol.STEP_TIMEOUT_TICKS, tag=f"ot:{session.session_id.hex()}:1"),
        ]

    def _on_accept(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        session = self.consumer_sessions.get(env.session_id)
        if session is None or session.owner_id != env.sender_id:
            return []
        protocol.consumer_on_accept(session, protocol.UsageAccept.decode(env.body))
        return []

    def _on_share(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        session = self.consumer_sessions.get(env.session_id)
        if session is None or session.owner_id != env.sender_id:
            return []
        ack = protocol.consumer_step(session, protocol.ShareMessage.decode(env.body))
        return [
            Send(dst=env.sender_id, envelope=self._envelope(wire.MSG_ACK, env.session_id, ack.encode())),
            Timer(at=now + protocol.STEP_TIMEOUT_TICKS, tag=f"ct:{env.session_id.hex()}:{len(session.shares)}"),
        ]

    def _on_ack(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        session = self.owner_sessions.get(env.session_id)
        if session is None or session.consumer_id != env.sender_id:
            return []
        result = protocol.owner_step(session, protocol.AckMessage.decode(env.body))
        if isinstance(result, protocol.ShareMessage):
            return [
                Send(dst=env.sender_id, envelope=self._envelope(wire.MSG_SHARE, env.session_id, result.encode())),
                Timer(at=now + protocol.STEP_TIMEOUT_TICKS, tag=f"ot:{env.session_id.hex()}:{session.x}"),
            ]
        return self._owner_complete(session, result, now)

    def _owner_complete(self, session: protocol.OwnerSession, completed: protocol.Completed, now: int) -> list[Effect]:
        effects = [
            Send(
                dst=session.consumer_id,
                envelope=self._envelope(wire.MSG_END, session.session_id, completed.end_marker.encode()),
            )
        ]
        self._emit({
            "kind": "session", "session_id": session.session_id.hex(),
            "consumer": session.consumer_id, "owner": self.identity_id,
            "datum_id": session.datum_id.hex(), "fake": session.fake, "n": session.n,
            "consumer_pseudonym": session.consumer_pseudonym.hex(),
            "owner_pseudonym": session.own_pseudonym.hex(),
            "completed_at": now,
        })
        if session.fake:
            return effects
        self.store.record_entry(
            keystore.KeyStoreEntry(
                pseudonym=session.own_pseudonym,
                key_pair=session.onetime,
                role=keystore.ROLE_OWNER,
                derivation_index=self._session_index.get(session.session_id, -1),
                counterparty_identity=session.consumer_id,
                evidence=protocol.encode_evidence(completed.evidence),
            )
        )
        record = ledger.UsageRecord(
            datum_id=session.datum_id,
            timestamp=now,
            purpose=session.purpose,
            label_t=session.label_t,
            counterpart_pseudonym=session.consumer_pseudonym,
        )
        pending = _PendingBlock(session_id=session.session_id, record=record, session=session)
        self.pending_blocks[session.session_id] = pending
        if self.config.publish_policy == PUBLISH_WAIT_FOR_K:
            pending.publish_after_foreign = self._foreign_blocks + self.config.wait_for_k
        else:
            delay = self.rng.randint(0, self.config.delta_max) if self.config.delta_max > 0 else 0
            effects.append(Timer(at=now + delay, tag=f"publish:{session.session_id.hex()}"))
        return effects

    def _on_end(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        session = self.consumer_sessions.get(env.session_id)
        if session is None or session.owner_id != env.sender_id:
            return []
        datum, evidence = protocol.consumer_finalize(session, protocol.EndMarker.decode(env.body))
        self.completed_requests.append(
            CompletedRequest(
                session_id=session.session_id,
                owner_id=session.owner_id,
                datum_id=session.datum_id,
                datum=datum,
                pseudonym=session.own_pseudonym,
                fake=session.fake,
            )
        )
        if not session.fake:
            self.store.record_entry(
                keystore.KeyStoreEntry(
                    pseudonym=session.own_pseudonym,
                    key_pair=session.onetime,
                    role=keystore.ROLE_CONSUMER,
                    derivation_index=self._session_index.get(session.session_id, -1),
                    counterparty_identity=session.owner_id,
                    evidence=protocol.encode_evidence(evidence),
                )
            )
            # The block may have arrived via a forwarder before this message.
            for _, block in ledger.query_by_pseudonym(self.chain, session.own_pseudonym):
                self.store.set_block_ref(session.own_pseudonym, ledger.block_hash(block))
        del self.consumer_sessions[env.session_id]
        return []

    # -- block gossip ----------------------------------------------------------

    def _announce(self, skip: Optional[str] = None) -> list[Effect]:
        body = ledger.serialize_chain(self.chain)
        session_id = self.chain.tip_hash()[:16]  # public announcement id
        effects = []
        for peer in self.neighbors:
            if peer == skip:
                continue
            effects.append(Send(dst=peer, envelope=self._envelope(wire.MSG_BLOCK, session_id, body)))
        return effects

    def _after_chain_growth(self, old_len: int) -> None:
        for index in range(old_len, len(self.chain.blocks)):
            block = self.chain.blocks[index]
            for pseudonym in (block.payload.consumer_pseudonym, block.payload.owner_pseudonym):
                if self.store.contains(pseudonym):
                    self.store.set_block_ref(pseudonym, ledger.block_hash(block))

    def _on_block(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        remote = ledger.deserialize_chain(env.body)
        tip = remote.tip_hash()
        if tip not in self._counted_tips:
            self._counted_tips.add(tip)
            self._foreign_blocks += 1
        effects: list[Effect] = []
        adopted = ledger.choose_chain(self.chain, remote)
        if adopted is remote and tip not in self._seen_tips:
            old_len = len(self.chain.blocks)
            self.chain = remote
            self._seen_tips.add(tip)
            self._after_chain_growth(old_len)
            effects.extend(self._announce(skip=env.sender_id))
        # A freshly satisfied wait-for-k policy publishes now.
        for pending in list(self.pending_blocks.values()):
            if pending.publish_after_foreign is not None and self._foreign_blocks >= pending.publish_after_foreign:
                effects.extend(self._publish(pending, now))
        return effects

    def _publish(self, pending: _PendingBlock, now: int) -> list[Effect]:
        self.pending_blocks.pop(pending.session_id, None)
        block = protocol.build_block(
            pending.session, pending.record, self.chain.tip_hash(), self.config.difficulty, self.rng
        )
        old_len = len(self.chain.blocks)
        ledger.append_block(self.chain, block)
        tip = self.chain.tip_hash()
        self._seen_tips.add(tip)
        self._after_chain_growth(old_len)
        self._emit({
            "kind": "block", "hash": ledger.block_hash(block).hex(),
            "session_id": pending.session_id.hex(),
            "owner": self.identity_id, "consumer": pending.session.consumer_id,
            "consumer_pseudonym": pending.session.consumer_pseudonym.hex(),
            "owner_pseudonym": pending.session.own_pseudonym.hex(),
            "published_at": now,
        })
        return self._announce()

    # -- erasure ---------------------------------------------------------------

    def begin_erase(self, pseudonym: Pseudonym, now: int) -> list[Effect]:
        """Ask the counterparty of one of our usages to delete their link to
        this pseudonym of ours."""
        entry = self.store.lookup(pseudonym)
        if entry.counterparty_identity is None or entry.block_ref is None:
            raise P3Error("entry has no counterparty link or block reference yet")
        session_id = self.rng.randbytes(16)
        request = ErasureRequest(target_pseudonym=pseudonym, block_ref=entry.block_ref)
        self._pending_erase_out[session_id] = request
        body = _encode_erase_req(_ERASE_INIT, request)
        return [
            Send(dst=entry.counterparty_identity, envelope=self._envelope(wire.MSG_ERASE_REQ, session_id, body)),
        ]

    def _on_erase_req(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        phase, request = _decode_erase_req(env.body)
        if phase == _ERASE_INIT:
            challenge = self.rng.randbytes(32)
            self._pending_erase_in[env.session_id] = challenge
            body = Writer().u8(_ERASE_CHALLENGE).bytes32(challenge).getvalue()
            return [Send(dst=env.sender_id, envelope=self._envelope(wire.MSG_ERASE_ACK, env.session_id, body))]
        return self.handle_erasure_request(env.session_id, env.sender_id, request, now)

    def handle_erasure_request(
        self, session_id: bytes, requester: str, request: ErasureRequest, now: int
    ) -> list[Effect]:
        """Verify the ownership proof and erase our link for that block.

        An adversarial node acknowledges without erasing; that is precisely
        the scenario the self-incrimination property answers.
        """
        ok = self._verify_and_erase(session_id, requester, request)
        self._emit({
            "kind": "erase", "requester": requester, "counterparty": self.identity_id,
            "pseudonym": request.target_pseudonym.hex(), "ok": ok,
            "honored": ok and not self.config.adversarial, "at": now,
        })
        body = Writer().u8(_ERASE_RESULT).u8(1 if ok else 0).getvalue()
        return [Send(dst=requester, envelope=self._envelope(wire.MSG_ERASE_ACK, session_id, body))]

    def _verify_and_erase(self, session_id: bytes, requester: str, request: ErasureRequest) -> bool:
        challenge = self._pending_erase_in.pop(session_id, None)
        if challenge is None or request.proof is None or request.proof.challenge != challenge:
            return False
        if not crypto.verify_ownership(request.target_pseudonym, request.proof, challenge):
            return False
        try:
            entry = self.store.lookup_by_block(request.block_ref)
        except UnknownPseudonym:
            return False
        if entry.counterparty_identity != requester:
            return False
        # The block must really bind the requester's pseudonym to ours.
        hits = [
            b for _, b in ledger.query_by_pseudonym(self.chain, request.target_pseudonym)
            if ledger.block_hash(b) == request.block_ref
        ]
        if not hits:
            return False
        if self.config.adversarial:
            return True  # acknowledges, keeps the link
        self.store.erase_link(entry.pseudonym, keep_keys=self.config.erase_keep_keys)
        return True

    def _on_erase_ack(self, env: wire.Envelope, peer_pub: PublicKey, now: int) -> list[Effect]:
        r = Reader(env.body)
        subtype = r.u8()
        if subtype == _ERASE_CHALLENGE:
            pending = self._pending_erase_out.get(env.session_id)
            if pending is None:
                return []
            challenge = r.bytes32()
            r.expect_done()
            entry = self.store.lookup(pending.target_pseudonym)
            if entry.key_pair is None:
                return []
            proof = crypto.prove_ownership(entry.key_pair, challenge, self.rng)
            request = ErasureRequest(
                target_pseudonym=pending.target_pseudonym,
                block_ref=pending.block_ref,
                scope=pending.scope,
                proof=proof,
            )
            body = _encode_erase_req(_ERASE_PROOF, request)
            return [Send(dst=env.sender_id, envelope=self._envelope(wire.MSG_ERASE_REQ, env.session_id, body))]
        ok = bool(r.u8())
        r.expect_done()
        pending = self._pending_erase_out.pop(env.session_id, None)
        if pending is not None:
            self.erase_outcomes.append({
                "counterparty": env.sender_id,
                "pseudonym": pending.target_pseudonym.hex(),
                "ok": ok,
                "at": now,
            })
        return []

    # -- claims ------------------------------------------------------------------

    def claim_identity_link(self, pseudonym: Pseudonym, counterparty: str) -> IdentityClaim:
        """Build a claim that ``pseudonym`` belongs to ``counterparty`` from
        held evidence; raises NoEvidence after erasure."""
        counterparty_pub = self.identity.peer_key(counterparty)
        for entry in self.store.entries():
            if entry.counterparty_identity != counterparty or entry.evidence is None:
                continue
            evidence = protocol.decode_evidence(entry.evidence)
            if not isinstance(evidence, protocol.EvidenceOwner):
                continue
            if crypto.derive_pseudonym(evidence.request.consumer_onetime_pub) != pseudonym:
                continue
            return IdentityClaim(
                claimant_id=self.identity_id,
                counterparty_id=counterparty,
                pseudonym=pseudonym,
                claimant_identity_pub=self.identity.identity_keypair.public_key.canonical_bytes(),
                counterparty_identity_pub=counterparty_pub.canonical_bytes() if counterparty_pub else b"",
                evidence=evidence,
            )
        raise NoEvidence(f"no evidence links {pseudonym.hex()[:16]}... to {counterparty!r}")

    def bare_claim(self, pseudonym: Pseudonym, counterparty: str) -> IdentityClaim:
        """Assertion without evidence; verifiers reject it."""
        counterparty_pub = self.identity.peer_key(counterparty)
        return IdentityClaim(
            claimant_id=self.identity_id,
            counterparty_id=counterparty,
            pseudonym=pseudonym,
            claimant_identity_pub=self.identity.identity_keypair.public_key.canonical_bytes(),
            counterparty_identity_pub=counterparty_pub.canonical_bytes() if counterparty_pub else b"",
            evidence=None,
        )

    # -- timers -------------------------------------------------------------------

    def on_timer(self, tag: str, now: int) -> list[Effect]:
        if tag.startswith("fake:"):
            if int(tag.split(":", 1)[1]) != self._fake_gen:
                return []  # superseded by a restart
            return self._run_fake(now)
        if tag.startswith("publish:"):
            pending = self.pending_blocks.get(bytes.fromhex(tag.split(":", 1)[1]))
            if pending is None:
                return []
            return self._publish(pending, now)
        if tag.startswith("ct:") or tag.startswith("ot:"):
            _, sid_hex, progress = tag.split(":")
            session_id = bytes.fromhex(sid_hex)
            sessions = self.consumer_sessions if tag.startswith("ct:") else self.owner_sessions
            session = sessions.get(session_id)
            if session is None or session.state is not protocol.SessionState.ACTIVE:
                return []
            current = len(session.shares) if tag.startswith("ct:") else session.x
            if current == int(progress):
                # No progress within the step budget: silent abort.
                session.abort()
                del sessions[session_id]
            return []
        return []

    def _run_fake(self, now: int) -> list[Effect]:
        effects: list[Effect] = []
        peers = [p for p in sorted(self.identity.pinned_peers) if p != self.identity_id]
        if peers:
            target = peers[self.rng.randrange(len(peers))]
            # Mimic the purposes of our real requests so decoy request
            # envelopes match them byte-length for byte-length.
            purpose = ""
            if self._sent_purposes:
                purpose = self._sent_purposes[self.rng.randrange(len(self._sent_purposes))]
            effects.extend(self.begin_request(target, ledger.FAKE_DATUM_ID, now, purpose=purpose))
        effects.append(Timer(at=now + self._fake_interval(), tag=f"fake:{self._fake_gen}"))
        return effects

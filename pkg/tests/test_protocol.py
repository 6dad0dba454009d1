import random
from dataclasses import replace

import pytest

from p3log import crypto, ledger, protocol
from p3log.errors import (
    BadSignature,
    CompositionError,
    ProtocolError,
    UnknownDatum,
    UnknownIdentity,
    WrongStep,
)

from conftest import KeyPool, pooled_keypair

ALICE = protocol.Party("alice", pooled_keypair(300))
BOB = protocol.Party("bob", pooled_keypair(301))

DATUM_ID = b"\x11" * 16
DATUM = b"the completed tasks of one subordinate"
STORE = {DATUM_ID: DATUM}

FAST = protocol.OwnerPolicy(n_min=3, n_max=3, slow_iterations=4, key_bits=2048)

pool = KeyPool(size=16)


def run_session(policy=FAST, seed=0, datum_id=DATUM_ID, purpose="report"):
    """Drive one honest session at the message level; returns everything."""
    rng = random.Random(seed)
    request, cs = protocol.consumer_start(
        ALICE, "bob", datum_id, BOB.identity_key.public_key, rng,
        purpose=purpose, key_bits=policy.key_bits, key_provider=pool,
    )
    accept, os_ = protocol.owner_accept(
        BOB, request, ALICE.identity_key.public_key, STORE, policy, rng, pool
    )
    protocol.consumer_on_accept(cs, accept)
    event = None
    while True:
        result = protocol.owner_step(os_, event)
        if isinstance(result, protocol.Completed):
            completed = result
            break
        event = protocol.consumer_step(cs, result)
    datum, consumer_evidence = protocol.consumer_finalize(cs, completed.end_marker)
    return {
        "rng": rng,
        "consumer_session": cs,
        "owner_session": os_,
        "completed": completed,
        "datum": datum,
        "consumer_evidence": consumer_evidence,
        "owner_evidence": completed.evidence,
    }


# ---------------------------------------------------------------------------
# session setup
# ---------------------------------------------------------------------------

def test_start_labels_are_fresh():
    rng = random.Random(1)
    r1, _ = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    r2, _ = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    assert r1.label_t != r2.label_t
    assert r1.session_id != r2.session_id


def test_request_signature_verifies():
    rng = random.Random(2)
    request, _ = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    assert crypto.verify(ALICE.identity_key.public_key, request.signed_bytes(), request.signature)


def test_fake_datum_marks_session():
    rng = random.Random(3)
    _, session = protocol.consumer_start(ALICE, "bob", ledger.FAKE_DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    assert session.fake


def test_owner_accept_rejects_bad_signature():
    rng = random.Random(4)
    request, _ = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    forged = replace(request, purpose="tampered")
    with pytest.raises(BadSignature):
        protocol.owner_accept(BOB, forged, ALICE.identity_key.public_key, STORE, FAST, rng, pool)


def test_owner_accept_rejects_unknown_identity():
    rng = random.Random(5)
    request, _ = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    with pytest.raises(UnknownIdentity):
        protocol.owner_accept(BOB, request, None, STORE, FAST, rng, pool)


def test_owner_accept_rejects_unknown_datum():
    rng = random.Random(6)
    request, _ = protocol.consumer_start(ALICE, "bob", b"\x99" * 16, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    with pytest.raises(UnknownDatum):
        protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)


def test_fake_request_always_accepted():
    rng = random.Random(7)
    request, _ = protocol.consumer_start(ALICE, "bob", ledger.FAKE_DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    accept, session = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    assert session.fake
    # decoy shares mimic the size of a stored datum
    assert len(session.prepared_shares[0]) == len(protocol._prepare_shares(DATUM, 1, 1, rng)[0])


# ---------------------------------------------------------------------------
# happy path
# ---------------------------------------------------------------------------

def test_happy_path_n3_transcript():
    out = run_session()
    assert out["owner_session"].n == 3
    assert len(out["owner_session"].sent_shares) == 3
    assert len(out["owner_session"].acks) == 3
    assert len(out["consumer_session"].shares) == 3
    assert out["datum"] == DATUM


def test_degenerate_single_step_policy():
    policy = protocol.OwnerPolicy(n_min=1, n_max=1, slow_iterations=2, key_bits=2048)
    out = run_session(policy=policy, seed=8)
    assert out["owner_session"].n == 1
    assert len(out["owner_session"].sent_shares) == 1
    assert out["datum"] == DATUM


def test_roundtrip_n8_random_datum():
    rng = random.Random(9)
    datum = rng.randbytes(500)
    datum_id = b"\x22" * 16
    STORE[datum_id] = datum
    try:
        policy = protocol.OwnerPolicy(n_min=8, n_max=8, slow_iterations=4, key_bits=2048)
        out = run_session(policy=policy, seed=10, datum_id=datum_id)
        assert out["datum"] == datum
    finally:
        del STORE[datum_id]


def test_evidence_both_sides_verify():
    out = run_session(seed=11)
    assert protocol.verify_evidence_owner(out["owner_evidence"], ALICE.identity_key.public_key)
    assert protocol.verify_evidence_consumer(out["consumer_evidence"], BOB.identity_key.public_key, DATUM)


# ---------------------------------------------------------------------------
# step validation
# ---------------------------------------------------------------------------

def test_owner_aborts_on_wrong_ack_digest():
    rng = random.Random(12)
    request, cs = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    accept, os_ = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    protocol.consumer_on_accept(cs, accept)
    share = protocol.owner_step(os_, None)
    ack = protocol.consumer_step(cs, share)
    bad = replace(ack, share_digest=b"\x00" * 32)
    with pytest.raises(WrongStep):
        protocol.owner_step(os_, bad)
    assert os_.state is protocol.SessionState.ABORTED


def test_owner_aborts_on_forged_ack_signature():
    rng = random.Random(13)
    request, cs = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    accept, os_ = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    protocol.consumer_on_accept(cs, accept)
    share = protocol.owner_step(os_, None)
    ack = protocol.consumer_step(cs, share)
    forged = replace(ack, signature=crypto.sign(BOB.identity_key.private_key, ack.signed_bytes(), rng))
    with pytest.raises(BadSignature):
        protocol.owner_step(os_, forged)


def test_consumer_rejects_tampered_share():
    rng = random.Random(14)
    request, cs = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    accept, os_ = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    protocol.consumer_on_accept(cs, accept)
    share = protocol.owner_step(os_, None)
    tampered = replace(share, share=bytes(b ^ 1 for b in share.share))
    with pytest.raises(BadSignature):
        protocol.consumer_step(cs, tampered)
    assert cs.state is protocol.SessionState.ABORTED


def test_consumer_rejects_out_of_order_share():
    rng = random.Random(15)
    request, cs = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    accept, os_ = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    protocol.consumer_on_accept(cs, accept)
    share1 = protocol.owner_step(os_, None)
    ack1 = protocol.consumer_step(cs, share1)
    share2 = protocol.owner_step(os_, ack1)
    skipped = replace(share2, x=3)
    with pytest.raises(WrongStep):
        protocol.consumer_step(cs, skipped)


def test_finalize_missing_share_fails_composition():
    out = run_session(seed=16)
    shares = [s.share for s in out["consumer_session"].shares]
    assert protocol.attempt_composition(shares[:-1], FAST.slow_iterations) is None
    assert protocol.attempt_composition(shares, FAST.slow_iterations) == DATUM


def test_finalize_rejects_wrong_end_count():
    rng = random.Random(17)
    request, cs = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    accept, os_ = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    protocol.consumer_on_accept(cs, accept)
    event = None
    while True:
        result = protocol.owner_step(os_, event)
        if isinstance(result, protocol.Completed):
            break
        event = protocol.consumer_step(cs, result)
    cs.shares.pop()  # lose one share
    with pytest.raises(CompositionError):
        protocol.consumer_finalize(cs, result.end_marker)


# ---------------------------------------------------------------------------
# block building
# ---------------------------------------------------------------------------

def _block_from(out, seed=18):
    os_ = out["owner_session"]
    record = ledger.UsageRecord(
        datum_id=os_.datum_id,
        timestamp=777,
        purpose=os_.purpose,
        label_t=os_.label_t,
        counterpart_pseudonym=os_.consumer_pseudonym,
    )
    block = protocol.build_block(os_, record, ledger.GENESIS_HASH, 8, random.Random(seed))
    return record, block


def test_block_both_copies_decrypt_identically():
    out = run_session(seed=19)
    record, block = _block_from(out)
    consumer_copy = crypto.decrypt_record(out["consumer_session"].onetime.private_key, block.payload.enc_consumer)
    owner_copy = crypto.decrypt_record(out["owner_session"].onetime.private_key, block.payload.enc_owner)
    assert consumer_copy == owner_copy == record.encode()
    assert block.payload.consumer_pseudonym == out["consumer_session"].own_pseudonym
    assert ledger.meets_difficulty(ledger.block_hash(block), 8)


def test_block_third_party_cannot_decrypt():
    out = run_session(seed=20)
    _, block = _block_from(out)
    stranger = pooled_keypair(310)
    from p3log.errors import AuthenticationFailure

    for ct in (block.payload.enc_consumer, block.payload.enc_owner):
        with pytest.raises(AuthenticationFailure):
            crypto.decrypt_record(stranger.private_key, ct)


def test_block_refused_for_fake_or_incomplete():
    rng = random.Random(21)
    request, cs = protocol.consumer_start(ALICE, "bob", DATUM_ID, BOB.identity_key.public_key, rng, key_provider=pool, key_bits=2048)
    _, os_ = protocol.owner_accept(BOB, request, ALICE.identity_key.public_key, STORE, FAST, rng, pool)
    record = ledger.UsageRecord(DATUM_ID, 1, "", b"\x00" * 16, os_.consumer_pseudonym)
    with pytest.raises(ProtocolError):
        protocol.build_block(os_, record, ledger.GENESIS_HASH, 0, rng)


# ---------------------------------------------------------------------------
# evidence verification and binding
# ---------------------------------------------------------------------------

def test_owner_evidence_rejects_substituted_ack():
    policy = protocol.OwnerPolicy(n_min=3, n_max=3, slow_iterations=2, key_bits=2048)
    out = run_session(policy=policy, seed=22)
    os_ = out["owner_session"]
    ev = out["owner_evidence"]
    earlier_ack = os_.acks[-2]  # ack_{n-1}: correctly signed, wrong digest
    forged = protocol.EvidenceOwner(request=ev.request, n=ev.n, final_share=ev.final_share, ack_final=earlier_ack)
    assert not protocol.verify_evidence_owner(forged, ALICE.identity_key.public_key)


def test_owner_evidence_rejects_forged_signature():
    out = run_session(seed=23)
    ev = out["owner_evidence"]
    bad_sig = bytearray(ev.ack_final.signature)
    bad_sig[0] ^= 1
    forged = protocol.EvidenceOwner(
        request=ev.request, n=ev.n, final_share=ev.final_share,
        ack_final=replace(ev.ack_final, signature=bytes(bad_sig)),
    )
    assert not protocol.verify_evidence_owner(forged, ALICE.identity_key.public_key)


def test_consumer_evidence_rejects_replaced_share():
    out = run_session(seed=24)
    ev = out["consumer_evidence"]
    other = run_session(seed=25)["consumer_evidence"]
    mixed = protocol.EvidenceConsumer(
        request=ev.request, accept=ev.accept,
        shares=ev.shares[:-1] + (other.shares[-1],),
    )
    assert not protocol.verify_evidence_consumer(mixed, BOB.identity_key.public_key, DATUM)


def test_consumer_evidence_exposes_owner_identity():
    # The owner's identity is a signed field of every share: publishing the
    # evidence necessarily names (and cryptographically implicates) the owner.
    out = run_session(seed=26)
    ev = out["consumer_evidence"]
    assert all(s.owner_id == "bob" for s in ev.shares)
    assert crypto.verify(BOB.identity_key.public_key, ev.shares[0].signed_bytes(), ev.shares[0].signature)


def test_evidence_field_mutations_falsify():
    out = run_session(seed=27)
    ev = out["owner_evidence"]
    pub = ALICE.identity_key.public_key
    assert protocol.verify_evidence_owner(ev, pub)
    mutants = [
        protocol.EvidenceOwner(ev.request, ev.n + 1, ev.final_share, ev.ack_final),
        protocol.EvidenceOwner(ev.request, ev.n, replace(ev.final_share, share=b"\x00" * len(ev.final_share.share)), ev.ack_final),
        protocol.EvidenceOwner(ev.request, ev.n, replace(ev.final_share, owner_id="eve"), ev.ack_final),
        protocol.EvidenceOwner(ev.request, ev.n, replace(ev.final_share, consumer_id="eve"), ev.ack_final),
        protocol.EvidenceOwner(ev.request, ev.n, replace(ev.final_share, label_t=b"\x00" * 16), ev.ack_final),
        protocol.EvidenceOwner(ev.request, ev.n, ev.final_share, replace(ev.ack_final, x=ev.n - 1)),
        protocol.EvidenceOwner(replace(ev.request, consumer_id="eve"), ev.n, ev.final_share, ev.ack_final),
    ]
    for mutant in mutants:
        assert not protocol.verify_evidence_owner(mutant, pub)

    cev = out["consumer_evidence"]
    bob_pub = BOB.identity_key.public_key
    assert protocol.verify_evidence_consumer(cev, bob_pub, DATUM)
    cmutants = [
        protocol.EvidenceConsumer(cev.request, cev.accept, cev.shares[:-1]),
        protocol.EvidenceConsumer(cev.request, cev.accept, tuple(replace(s, label_t=b"\x01" * 16) for s in cev.shares)),
        protocol.EvidenceConsumer(cev.request, replace(cev.accept, slow_iterations=cev.accept.slow_iterations + 1), cev.shares),
    ]
    for mutant in cmutants:
        assert not protocol.verify_evidence_consumer(mutant, bob_pub, DATUM)
    assert not protocol.verify_evidence_consumer(cev, bob_pub, DATUM + b"!")


def test_evidence_serialization_roundtrip():
    out = run_session(seed=28)
    for ev in (out["owner_evidence"], out["consumer_evidence"]):
        assert protocol.decode_evidence(protocol.encode_evidence(ev)) == ev


# ---------------------------------------------------------------------------
# cheating consumer
# ---------------------------------------------------------------------------

CHEAT_POLICY = protocol.OwnerPolicy(n_min=2, n_max=5, slow_iterations=2, key_bits=2048)


def test_cheat_before_n_gets_nothing():
    rng = random.Random(29)
    outcome = protocol.run_cheating_session(ALICE, BOB, DATUM_ID, STORE, 1, protocol.OwnerPolicy(n_min=3, n_max=3, slow_iterations=2, key_bits=2048), rng, pool)
    assert outcome.n == 3 and not outcome.got_datum and not outcome.owner_has_final_ack


def test_cheat_at_n_wins_without_ack():
    rng = random.Random(30)
    outcome = protocol.run_cheating_session(ALICE, BOB, DATUM_ID, STORE, 3, protocol.OwnerPolicy(n_min=3, n_max=3, slow_iterations=2, key_bits=2048), rng, pool)
    assert outcome.got_datum and not outcome.owner_has_final_ack


def test_cheat_after_n_is_honest_completion():
    rng = random.Random(31)
    outcome = protocol.run_cheating_session(ALICE, BOB, DATUM_ID, STORE, 9, protocol.OwnerPolicy(n_min=3, n_max=3, slow_iterations=2, key_bits=2048), rng, pool)
    assert outcome.got_datum and outcome.owner_has_final_ack


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

def test_share_messages_leak_nothing_about_n():
    # Same datum, different n: the x-th message has identical length either
    # way, so a receiver cannot infer n from what it has seen so far.
    sizes_by_n = {}
    for n in (2, 5, 9):
        policy = protocol.OwnerPolicy(n_min=n, n_max=n, slow_iterations=2, key_bits=2048)
        out = run_session(policy=policy, seed=32)
        sizes_by_n[n] = [len(s.encode()) for s in out["consumer_session"].shares]
    assert sizes_by_n[2][0] == sizes_by_n[5][0] == sizes_by_n[9][0]
    assert sizes_by_n[5][1] == sizes_by_n[9][1] == sizes_by_n[2][1]


def test_composition_roundtrip_scaling():
    rng = random.Random(33)
    for n in (1, 2, 16, 64):
        datum = rng.randbytes(min(65536, 256 * n))
        shares = protocol._prepare_shares(datum, n, 3, rng)
        assert protocol.attempt_composition(list(shares), 3) == datum
        assert protocol.attempt_composition(list(shares[:-1]), 3) is None


def test_fairness_on_aborted_sessions():
    # Whoever aborts, the owner never ends up with final-ack evidence unless
    # the consumer obtained the datum.
    rng = random.Random(34)
    for k in range(1, 8):
        outcome = protocol.run_cheating_session(ALICE, BOB, DATUM_ID, STORE, k, CHEAT_POLICY, rng, pool)
        if outcome.owner_has_final_ack:
            assert outcome.got_datum  # completed honestly (k > n)
        if not outcome.got_datum:
            assert not outcome.owner_has_final_ack

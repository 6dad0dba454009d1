"""Command-line front end: run scenarios, inspect chains and stores, drive
erasure, verify evidence, and manage keys and backup shards.

Exit codes: 0 success / verdict true, 1 verdict false, 2 parse or usage
error, 3 runtime failure, 4 unreadable store.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import struct
import sys
from typing import Optional

from . import attacks, crypto, keystore, ledger, netsim, protocol
from .crypto import Pseudonym
from .encoding import MalformedBytes, Reader, Writer
from .errors import KeyStoreError, P3Error, ScenarioError

EXIT_OK = 0
EXIT_FALSE = 1
EXIT_PARSE = 2
EXIT_RUNTIME = 3
EXIT_BAD_STORE = 4

EVIDENCE_MAGIC = b"P3EV"
EVIDENCE_VERSION = 1
SHARD_MAGIC = b"P3SH"
SHARD_VERSION = 1


# ---------------------------------------------------------------------------
# evidence and shard files
# ---------------------------------------------------------------------------

def write_evidence_file(path: str, evidence: protocol.Evidence, peer_identity_pub: bytes) -> None:
    w = Writer().raw(EVIDENCE_MAGIC).u16(EVIDENCE_VERSION)
    w.bytes32(peer_identity_pub)
    w.bytes32(protocol.encode_evidence(evidence))
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def read_evidence_file(path: str) -> tuple[protocol.Evidence, bytes]:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    if r.raw(4) != EVIDENCE_MAGIC:
        raise P3Error("not an evidence file")
    version = r.u16()
    if version != EVIDENCE_VERSION:
        raise P3Error(f"unsupported evidence file version {version}")
    peer_pub = r.bytes32()
    evidence = protocol.decode_evidence(r.bytes32())
    r.expect_done()
    return evidence, peer_pub


def write_shard_file(path: str, shard: tuple[int, bytes], k: int, m: int, key_bits: int) -> None:
    index, payload = shard
    w = Writer().raw(SHARD_MAGIC).u16(SHARD_VERSION).u8(k).u8(m).u8(index).u32(key_bits).bytes32(payload)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def read_shard_file(path: str) -> tuple[tuple[int, bytes], int, int, int]:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    if r.raw(4) != SHARD_MAGIC:
        raise P3Error(f"{path}: not a shard file")
    version = r.u16()
    if version != SHARD_VERSION:
        raise P3Error(f"{path}: unsupported shard file version {version}")
    k, m, index = r.u8(), r.u8(), r.u8()
    key_bits = r.u32()
    payload = r.bytes32()
    r.expect_done()
    return (index, payload), k, m, key_bits


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        with open(args.config) as fh:
            config = netsim.parse_sim_config(fh.read())
        with open(args.scenario) as fh:
            script = netsim.parse_script(fh.read())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ScenarioError as exc:
        where = f" (line {exc.line})" if exc.line else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_PARSE
    if args.seed is not None:
        config.seed = args.seed
    try:
        result = netsim.run_scenario(config, script)
    except P3Error as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    os.makedirs(args.out, exist_ok=True)
    for name, node in result.nodes.items():
        ledger.save_chain(node.chain, os.path.join(args.out, f"{name}.chain"))
        node.store.save(os.path.join(args.out, f"{name}.store"))
    with open(os.path.join(args.out, "trace.txt"), "wb") as fh:
        fh.write(result.trace.serialize())
    reports = [
        attacks.attack_identity_inversion([result]),
        attacks.attack_identity_inversion([result], oracle=True),
        attacks.attack_linkage([result], "consumer"),
        attacks.attack_linkage([result], "owner"),
    ]
    if result.truth.erasures():
        reports.append(attacks.attack_post_erasure_leak(result))
    if result.truth.sessions(fake=True):
        reports.append(attacks.classify_fake_vs_real([result]))
    if result.truth.blocks():
        reports.append(attacks.attack_block_attribution(result))
    named = []
    for i, report in enumerate(reports):
        entry = report.as_dict()
        if i == 1:
            entry["attack_id"] = "a-oracle"
        named.append(entry)
    with open(os.path.join(args.out, "attacks.json"), "w") as fh:
        json.dump(named, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.porcelain:
        blocks = len(result.truth.blocks())
        print(f"simulated {config.duration} ticks, {len(result.nodes)} nodes, {blocks} blocks -> {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    try:
        chain = ledger.load_chain(args.chain)
    except (OSError, P3Error) as exc:
        print(f"error: cannot read chain: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    err = ledger.validate_chain(chain)
    if err is not None:
        print(f"error: chain invalid at index {err.index}: {err.kind}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        store = keystore.KeyStore.load(args.store)
    except (OSError, KeyStoreError, P3Error) as exc:
        print(f"error: cannot read store: {exc}", file=sys.stderr)
        return EXIT_BAD_STORE
    for entry in ledger.read_own_entries(chain, store):
        if args.porcelain:
            record = entry.record
            fields = [
                str(entry.block_index),
                entry.role,
                entry.pseudonym.hex(),
                str(record.timestamp) if record else "-",
                record.datum_id.hex() if record else "-",
                record.purpose if record else "-",
                entry.error or "ok",
            ]
            print("\t".join(fields))
        elif entry.record is not None:
            r = entry.record
            print(f"block {entry.block_index}: time {r.timestamp} datum {r.datum_id.hex()} purpose {r.purpose!r}")
        else:
            print(f"block {entry.block_index}: <{entry.error}>")
    return EXIT_OK


def cmd_erase(args) -> int:
    """Offline erase handshake against simulation output files."""
    requester_store_path = os.path.join(args.dir, f"{args.requester}.store")
    try:
        requester_store = keystore.KeyStore.load(requester_store_path)
    except (OSError, KeyStoreError) as exc:
        print(f"error: cannot read requester store: {exc}", file=sys.stderr)
        return EXIT_BAD_STORE
    try:
        pseudonym = Pseudonym.from_hex(args.pseudonym)
    except (ValueError, P3Error):
        print("error: pseudonym must be 64 hex digits", file=sys.stderr)
        return EXIT_PARSE
    try:
        entry = requester_store.lookup(pseudonym)
    except KeyStoreError:
        print("error: requester store has no such pseudonym", file=sys.stderr)
        return EXIT_FALSE
    if entry.counterparty_identity is None or entry.block_ref is None or entry.key_pair is None:
        print("error: entry lacks counterparty, block reference, or keys", file=sys.stderr)
        return EXIT_FALSE
    counterparty = entry.counterparty_identity
    target_store_path = os.path.join(args.dir, f"{counterparty}.store")
    target_chain_path = os.path.join(args.dir, f"{counterparty}.chain")
    try:
        target_store = keystore.KeyStore.load(target_store_path)
        chain = ledger.load_chain(target_chain_path)
    except (OSError, P3Error) as exc:
        print(f"error: cannot read counterparty state: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    # The counterparty-side verification, run locally over its files.
    rng = random.SystemRandom()
    challenge = rng.randbytes(32)
    proof = crypto.prove_ownership(entry.key_pair, challenge)
    if not crypto.verify_ownership(pseudonym, proof, challenge):
        print("REFUSED: ownership proof invalid", file=sys.stderr)
        return EXIT_FALSE
    try:
        target_entry = target_store.lookup_by_block(entry.block_ref)
    except KeyStoreError:
        print("REFUSED: counterparty has no entry for that block", file=sys.stderr)
        return EXIT_FALSE
    if target_entry.counterparty_identity != args.requester:
        print("REFUSED: counterparty entry does not link the requester", file=sys.stderr)
        return EXIT_FALSE
    hits = [
        b for _, b in ledger.query_by_pseudonym(chain, pseudonym)
        if ledger.block_hash(b) == entry.block_ref
    ]
    if not hits:
        print("REFUSED: block does not bind that pseudonym", file=sys.stderr)
        return EXIT_FALSE
    target_store.erase_link(target_entry.pseudonym, keep_keys=args.keep_keys)
    target_store.save(target_store_path)
    print(f"ERASED: {counterparty} no longer links {args.pseudonym[:16]}... to {args.requester}")
    return EXIT_OK


def cmd_verify_evidence(args) -> int:
    try:
        evidence, peer_pub_bytes = read_evidence_file(args.evidence)
        peer_pub = crypto.PublicKey.from_canonical(peer_pub_bytes)
    except (OSError, P3Error, MalformedBytes) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    expected_datum: Optional[bytes] = None
    if args.datum is not None:
        try:
            with open(args.datum, "rb") as fh:
                expected_datum = fh.read()
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PARSE
    if isinstance(evidence, protocol.EvidenceOwner):
        valid = protocol.verify_evidence_owner(evidence, peer_pub)
    else:
        valid = protocol.verify_evidence_consumer(evidence, peer_pub, expected_datum)
    print("VALID" if valid else "INVALID")
    return EXIT_OK if valid else EXIT_FALSE


def cmd_keygen(args) -> int:
    if args.seed is not None:
        try:
            seed = bytes.fromhex(args.seed)
        except ValueError:
            print("error: seed must be hex", file=sys.stderr)
            return EXIT_PARSE
        if len(seed) != 32:
            print("error: seed must be 32 bytes of hex", file=sys.stderr)
            return EXIT_PARSE
    else:
        seed = random.SystemRandom().randbytes(32)
    try:
        store = keystore.KeyStore(keystore.MasterKey(seed=seed), key_bits=args.bits)
        identity = store.identity_keypair()
    except P3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    store.save(args.out)
    fingerprint = crypto.derive_pseudonym(identity.public_key.canonical_bytes())
    print(f"wrote {args.out} ({args.bits}-bit keys, identity fingerprint {fingerprint.hex()[:16]})")
    return EXIT_OK


def cmd_shard_export(args) -> int:
    try:
        store = keystore.KeyStore.load(args.store)
    except (OSError, KeyStoreError) as exc:
        print(f"error: cannot read store: {exc}", file=sys.stderr)
        return EXIT_BAD_STORE
    try:
        shards = store.export_shards(args.k, args.m)
    except P3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    os.makedirs(args.out, exist_ok=True)
    for index, payload in shards.shards:
        path = os.path.join(args.out, f"shard-{index:03d}.p3sh")
        write_shard_file(path, (index, payload), args.k, args.m, store.key_bits)
    print(f"wrote {args.m} shards (any {args.k} restore the master) to {args.out}")
    return EXIT_OK


def cmd_shard_restore(args) -> int:
    shards = []
    k = m = key_bits = None
    try:
        for path in args.shards:
            shard, sk, sm, bits = read_shard_file(path)
            if k is None:
                k, m, key_bits = sk, sm, bits
            elif (sk, sm, bits) != (k, m, key_bits):
                print("error: shard files disagree about their parameters", file=sys.stderr)
                return EXIT_PARSE
            shards.append(shard)
    except (OSError, P3Error, MalformedBytes) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        master = keystore.restore_from_shards(
            crypto.KeyShards(shards=tuple(shards), threshold=k, total=m)
        )
    except P3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FALSE
    store = keystore.KeyStore(master, key_bits=key_bits)
    store.save(args.out)
    print(f"restored master key into {args.out}")
    return EXIT_OK


def cmd_validate_chain(args) -> int:
    try:
        chain = ledger.load_chain(args.chain)
    except (OSError, P3Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    err = ledger.validate_chain(chain)
    if err is None:
        print(f"ok height {len(chain.blocks)}")
        return EXIT_OK
    print(f"invalid at index {err.index}: {err.kind}")
    return EXIT_FALSE


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p3log", description=__doc__)
    parser.add_argument("--porcelain", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scripted network scenario")
    p.add_argument("scenario", help="scenario script file")
    p.add_argument("--config", required=True, help="simulation config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("query", help="decrypt and list own log entries")
    p.add_argument("--chain", required=True)
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("erase", help="run an erasure handshake over simulation output")
    p.add_argument("--dir", required=True, help="simulation output directory")
    p.add_argument("--requester", required=True, help="requesting node name")
    p.add_argument("--pseudonym", required=True, help="pseudonym to unlink (hex)")
    p.add_argument("--keep-keys", action="store_true")
    p.set_defaults(func=cmd_erase)

    p = sub.add_parser("verify-evidence", help="check a stored evidence file")
    p.add_argument("evidence")
    p.add_argument("--datum", default=None, help="expected datum file (consumer evidence)")
    p.set_defaults(func=cmd_verify_evidence)

    p = sub.add_parser("keygen", help="create a fresh key store")
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, default=crypto.DEFAULT_KEY_BITS)
    p.add_argument("--seed", default=None, help="hex master seed (32 bytes) for reproducible keys")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("shard-export", help="split the master key into threshold shards")
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--out", required=True, help="directory for shard files")
    p.set_defaults(func=cmd_shard_export)

    p = sub.add_parser("shard-restore", help="restore a master key from shards")
    p.add_argument("shards", nargs="+")
    p.add_argument("--out", required=True, help="store file to write")
    p.set_defaults(func=cmd_shard_restore)

    p = sub.add_parser("validate-chain", help="validate a chain file")
    p.add_argument("chain")
    p.set_defaults(func=cmd_validate_chain)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except P3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
